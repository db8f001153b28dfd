//! Evaluation against the synthetic oracle: held-out NLL, sample
//! divergence, copy rates, and run comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use sha2::{Digest, Sha256};

use crate::decode::{self, DecodeConfig, ThroughputRow};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{self, ModelParams, SequenceInput};
use crate::noise::{LossWeights, NoiseSchedule};
use crate::seed::{self, Stream};
use crate::tensorize;
use crate::toydata::{self, Sample, SyntheticSpec, TokenId};
use crate::train::{self, PreparedSample};

const EVAL_CHUNK: usize = 32;

/// Anything that maps windowed inputs to `B × T × k × V` logits.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;
    fn window_size(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn logits(&self, inputs: &[SequenceInput]) -> Result<Vec<f64>>;
}

impl<F: Real> LogitSource for ModelParams<F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn window_size(&self) -> usize {
        self.config.k
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn logits(&self, inputs: &[SequenceInput]) -> Result<Vec<f64>> {
        let (logits, _) = model::forward_batch(self, inputs)?;
        Ok(logits.iter().map(|x| x.to_f64()).collect())
    }
}

/// `k = 1` predictor whose logits are the log oracle conditionals. Reads
/// the prefix from its (clean) input windows.
#[derive(Debug, Clone)]
pub struct OracleModel<'a> {
    pub spec: &'a SyntheticSpec,
}

impl LogitSource for OracleModel<'_> {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn window_size(&self) -> usize {
        1
    }

    fn seq_len(&self) -> usize {
        self.spec.seq_len()
    }

    fn logits(&self, inputs: &[SequenceInput]) -> Result<Vec<f64>> {
        let t_len = self.spec.seq_len();
        let mut out = Vec::with_capacity(inputs.len() * t_len * self.spec.vocab_size);
        for inp in inputs {
            for t in 0..t_len {
                let probs = toydata::oracle_conditional(self.spec, inp.class_label, &inp.windows[..t], t)?;
                out.extend(probs.iter().map(|p| p.ln()));
            }
        }
        Ok(out)
    }
}

/// Mean per-cell NLL and its per-slot breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct NllSummary {
    pub per_token: f64,
    pub slot_nll: Vec<f64>,
    pub cells: usize,
}

/// Held-out NLL with clean inputs and with train-matched input corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutNll {
    pub clean: NllSummary,
    pub noised: NllSummary,
}

fn prepare(source: &impl LogitSource, dataset: &[Sample], schedule: &NoiseSchedule, seed: u64) -> Result<Vec<PreparedSample>> {
    if dataset.is_empty() {
        return Err(Error::param("empty evaluation set"));
    }
    let (k, v, t_len) = (source.window_size(), source.vocab_size(), source.seq_len());
    if schedule.k != k {
        return Err(Error::param(format!("schedule for k = {}, model has k = {k}", schedule.k)));
    }
    dataset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.tokens.len() != t_len {
                return Err(Error::param(format!(
                    "sample {i} has {} tokens, expected {t_len}",
                    s.tokens.len()
                )));
            }
            let item_seed = seed::derive(seed, Stream::Corrupt, i as u64);
            train::prepare_sample(s, k, v, schedule, item_seed)
        })
        .collect()
}

fn chunk_logits(source: &impl LogitSource, chunk: &[PreparedSample]) -> Result<Vec<f64>> {
    let inputs: Vec<SequenceInput> = chunk
        .iter()
        .map(|p| SequenceInput {
            class_label: p.class_label,
            windows: &p.windowed.inputs,
        })
        .collect();
    source.logits(&inputs)
}

fn nll_prepared(source: &impl LogitSource, prepared: &[PreparedSample]) -> Result<NllSummary> {
    let (k, v) = (source.window_size(), source.vocab_size());
    let weights = LossWeights::uniform(k);
    let mut slot_sum = vec![0.0; k];
    let mut slot_counts = vec![0usize; k];
    for chunk in prepared.chunks(EVAL_CHUNK) {
        let logits = chunk_logits(source, chunk)?;
        let targets: Vec<TokenId> = chunk.iter().flat_map(|p| p.targets.iter().copied()).collect();
        let mask: Vec<bool> = chunk.iter().flat_map(|p| p.mask.iter().copied()).collect();
        let part = train::loss(&logits, &targets, &mask, &weights, v)?;
        for j in 0..k {
            if part.slot_counts[j] > 0 {
                slot_sum[j] += part.slot_losses[j] * part.slot_counts[j] as f64;
                slot_counts[j] += part.slot_counts[j];
            }
        }
    }
    let cells: usize = slot_counts.iter().sum();
    if cells == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(NllSummary {
        per_token: slot_sum.iter().sum::<f64>() / cells as f64,
        slot_nll: slot_sum
            .iter()
            .zip(&slot_counts)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        cells,
    })
}

/// Teacher-forced NLL with inputs corrupted by `schedule` (seeded per
/// sample from `seed`). A zero schedule gives clean-input evaluation.
pub fn nll_with_schedule(
    source: &impl LogitSource,
    dataset: &[Sample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<NllSummary> {
    let prepared = prepare(source, dataset, schedule, seed)?;
    nll_prepared(source, &prepared)
}

/// Clean-input and train-matched held-out NLL.
pub fn heldout_nll(
    source: &impl LogitSource,
    dataset: &[Sample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<HeldoutNll> {
    let off = NoiseSchedule::none(source.window_size())?;
    let clean = nll_with_schedule(source, dataset, &off, seed)?;
    let noised = if schedule.is_zero() {
        clean.clone()
    } else {
        nll_with_schedule(source, dataset, schedule, seed)?
    };
    Ok(HeldoutNll { clean, noised })
}

/// Fraction of cells, per overlapping slot `j < k − 1`, where the argmax
/// prediction equals the aligned clean input symbol. Length `k − 1`.
pub fn copy_rates(source: &impl LogitSource, dataset: &[Sample]) -> Result<Vec<f64>> {
    let (k, v) = (source.window_size(), source.vocab_size());
    let off = NoiseSchedule::none(k)?;
    let prepared = prepare(source, dataset, &off, 0)?;
    let pad = tensorize::padding(v);
    let t_len = source.seq_len();
    let mut hits = vec![0usize; k.saturating_sub(1)];
    let mut total = vec![0usize; k.saturating_sub(1)];
    for chunk in prepared.chunks(EVAL_CHUNK) {
        let logits = chunk_logits(source, chunk)?;
        for (b, p) in chunk.iter().enumerate() {
            // Output row t sees input window t − 1, whose symbol j + 1 is
            // the same position as the row's slot j.
            for t in 1..t_len {
                let input = p.windowed.input_window(t - 1);
                for j in 0..k - 1 {
                    let sym = input[j + 1];
                    if sym == pad {
                        continue;
                    }
                    let start = ((b * t_len + t) * k + j) * v;
                    let pred = decode::argmax(&logits[start..start + v]) as TokenId;
                    total[j] += 1;
                    if pred == sym {
                        hits[j] += 1;
                    }
                }
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
        .collect())
}

/// Sample-distribution statistics of a model against the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub bigram_l1: f64,
    pub exact_nll_gap: f64,
    /// Standard error of `exact_nll_gap` from the two sample variances.
    pub gap_std_error: f64,
}

pub fn oracle_samples(spec: &SyntheticSpec, class_label: usize, n: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    (0..n)
        .map(|i| toydata::sample_grid(spec, class_label, seed::derive(seed, Stream::Sample, i as u64)).map(|s| s.tokens))
        .collect()
}

/// `n` decodes for one class, sample `i` seeded by [`decode::sample_seed`].
/// Work is split across the available cores; the result does not depend on
/// the split.
pub fn model_samples<F: Real>(
    params: &ModelParams<F>,
    class_label: usize,
    n: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<TokenId>>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(n.max(1));
    let per = n.div_ceil(workers.max(1)).max(1);
    let run = |range: std::ops::Range<usize>| -> Result<Vec<Vec<TokenId>>> {
        range
            .map(|i| {
                let c = cfg.with_seed(decode::sample_seed(cfg.seed, i as u64));
                decode::generate(params, class_label, &c).map(|(tokens, _)| tokens)
            })
            .collect()
    };
    if workers <= 1 {
        return run(0..n);
    }
    let parts: Vec<Result<Vec<Vec<TokenId>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(per)
            .map(|start| {
                let end = (start + per).min(n);
                s.spawn(move || run(start..end))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

/// Divergence between two sample sets of one class.
pub fn sample_set_divergence(
    spec: &SyntheticSpec,
    class_label: usize,
    model: &[Vec<TokenId>],
    oracle: &[Vec<TokenId>],
) -> Result<Divergence> {
    if model.is_empty() || oracle.is_empty() {
        return Err(Error::param("divergence needs non-empty sample sets"));
    }
    let v = spec.vocab_size;
    let hm = toydata::horizontal_bigram_histogram(model, v, spec.width);
    let ho = toydata::horizontal_bigram_histogram(oracle, v, spec.width);
    let nll = |set: &[Vec<TokenId>]| -> Result<Vec<f64>> {
        set.iter().map(|s| toydata::exact_nll(spec, class_label, s)).collect()
    };
    let (mm, vm) = mean_var(&nll(model)?);
    let (mo, vo) = mean_var(&nll(oracle)?);
    Ok(Divergence {
        bigram_l1: toydata::l1_distance(&hm, &ho),
        exact_nll_gap: mm - mo,
        gap_std_error: (vm / model.len() as f64 + vo / oracle.len() as f64).sqrt(),
    })
}

pub const MIN_DIVERGENCE_SAMPLES: usize = 1000;

/// Model samples versus `n_samples` fresh oracle samples for one class.
pub fn divergence_with<F: Real>(
    params: &ModelParams<F>,
    spec: &SyntheticSpec,
    class_label: usize,
    n_samples: usize,
    cfg: &DecodeConfig,
) -> Result<Divergence> {
    if n_samples < MIN_DIVERGENCE_SAMPLES {
        return Err(Error::param(format!(
            "divergence needs at least {MIN_DIVERGENCE_SAMPLES} samples, got {n_samples}"
        )));
    }
    if params.config.seq_len != spec.seq_len() || params.config.vocab_size != spec.vocab_size {
        return Err(Error::param("model and spec disagree on sequence length or vocabulary"));
    }
    let model = model_samples(params, class_label, n_samples, cfg)?;
    let oracle = oracle_samples(spec, class_label, n_samples, seed::derive(cfg.seed, Stream::Probe, class_label as u64))?;
    sample_set_divergence(spec, class_label, &model, &oracle)
}

/// [`divergence_with`] under default sampling settings.
pub fn divergence<F: Real>(
    params: &ModelParams<F>,
    spec: &SyntheticSpec,
    class_label: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Divergence> {
    divergence_with(params, spec, class_label, n_samples, &DecodeConfig::new(spec.vocab_size, seed))
}

/// Mean of per-class divergences over every class of `spec`.
pub fn divergence_all_classes<F: Real>(
    params: &ModelParams<F>,
    spec: &SyntheticSpec,
    n_per_class: usize,
    cfg: &DecodeConfig,
) -> Result<Divergence> {
    let c = spec.num_classes();
    let mut acc = Divergence {
        bigram_l1: 0.0,
        exact_nll_gap: 0.0,
        gap_std_error: 0.0,
    };
    let mut var = 0.0;
    for class in 0..c {
        let d = divergence_with(params, spec, class, n_per_class, &cfg.with_seed(seed::derive(cfg.seed, Stream::Decode, class as u64)))?;
        acc.bigram_l1 += d.bigram_l1 / c as f64;
        acc.exact_nll_gap += d.exact_nll_gap / c as f64;
        var += d.gap_std_error * d.gap_std_error;
    }
    acc.gap_std_error = var.sqrt() / c as f64;
    Ok(acc)
}

/// Short hex digest identifying a synthetic spec.
pub fn spec_fingerprint(spec: &SyntheticSpec) -> String {
    let mut h = Sha256::new();
    h.update(format!(
        "{} {} {} {:?} {} {:?}",
        spec.vocab_size,
        spec.height,
        spec.width,
        spec.mix_weight.to_bits(),
        spec.seed,
        spec.class_seeds
    ));
    let digest = h.finalize();
    digest[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub spec_fingerprint: String,
    pub seed: u64,
    pub k: usize,
    pub heldout: HeldoutNll,
    pub bigram_l1: f64,
    pub exact_nll_gap: f64,
    pub throughput: Vec<ThroughputRow>,
    pub config_echo: Vec<(String, String)>,
}

impl EvalReport {
    /// Clean-input held-out NLL per token.
    pub fn heldout_nll_per_token(&self) -> f64 {
        self.heldout.clean.per_token
    }

    pub fn validate(&self) -> Result<()> {
        let mut vals = vec![self.heldout.clean.per_token, self.heldout.noised.per_token, self.exact_nll_gap];
        vals.extend(&self.heldout.clean.slot_nll);
        if vals.iter().any(|x| !x.is_finite()) {
            return Err(Error::Consistency("report holds non-finite values".into()));
        }
        if !(0.0..=2.0).contains(&self.bigram_l1) {
            return Err(Error::Consistency(format!("bigram_l1 {} outside [0, 2]", self.bigram_l1)));
        }
        Ok(())
    }

    /// Nested `a.b.c = value` lines, one value per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let slots = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "report.label = {}", self.label);
        let _ = writeln!(s, "report.spec = {}", self.spec_fingerprint);
        let _ = writeln!(s, "report.seed = {}", self.seed);
        let _ = writeln!(s, "report.k = {}", self.k);
        for (name, n) in [("clean", &self.heldout.clean), ("noised", &self.heldout.noised)] {
            let _ = writeln!(s, "heldout.{name}.per_token = {:.6}", n.per_token);
            let _ = writeln!(s, "heldout.{name}.slot_nll = {}", slots(&n.slot_nll));
            let _ = writeln!(s, "heldout.{name}.cells = {}", n.cells);
        }
        let _ = writeln!(s, "samples.bigram_l1 = {:.6}", self.bigram_l1);
        let _ = writeln!(s, "samples.exact_nll_gap = {:.6}", self.exact_nll_gap);
        for (i, r) in self.throughput.iter().enumerate() {
            let _ = writeln!(s, "throughput.{i}.label = {}", r.label);
            let _ = writeln!(s, "throughput.{i}.k = {}", r.k);
            let _ = writeln!(s, "throughput.{i}.samples_per_sec = {:.3}", r.samples_per_sec);
            let _ = writeln!(s, "throughput.{i}.ms_per_step = {:.5}", r.ms_per_step);
        }
        for (k, v) in &self.config_echo {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        s
    }

    /// One-row summary with a header.
    pub fn to_tsv(&self) -> String {
        let sps = self.throughput.iter().find(|r| r.k == self.k).map_or(f64::NAN, |r| r.samples_per_sec);
        format!(
            "label\tk\tspec\tseed\theldout_nll\theldout_nll_noised\tbigram_l1\texact_nll_gap\tsamples_per_sec\n{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
            self.label,
            self.k,
            self.spec_fingerprint,
            self.seed,
            self.heldout.clean.per_token,
            self.heldout.noised.per_token,
            self.bigram_l1,
            self.exact_nll_gap,
            sps
        )
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("key-value text", format!("line {}: missing '='", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// One row of a comparison table; deltas are relative to the first report.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub k: usize,
    pub heldout_nll: f64,
    pub delta_nll: f64,
    pub bigram_l1: f64,
    pub delta_l1: f64,
    pub relative_delta_l1: f64,
    pub samples_per_sec: f64,
    pub rank_nll: usize,
    pub rank_l1: usize,
}

fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut r = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        r[i] = rank + 1;
    }
    r
}

/// Ranks reports by held-out NLL and by bigram L1. The first report is the
/// baseline for the delta columns. Rows come back ordered by NLL rank.
pub fn compare_runs(reports: &[EvalReport]) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(Error::param("comparison needs at least two reports"));
    }
    let spec = &reports[0].spec_fingerprint;
    if let Some(r) = reports.iter().find(|r| &r.spec_fingerprint != spec) {
        return Err(Error::param(format!(
            "report {:?} was evaluated on spec {}, baseline on {spec}",
            r.label, r.spec_fingerprint
        )));
    }
    let nll: Vec<f64> = reports.iter().map(|r| r.heldout.clean.per_token).collect();
    let l1: Vec<f64> = reports.iter().map(|r| r.bigram_l1).collect();
    let (rn, rl) = (ranks(&nll), ranks(&l1));
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            label: r.label.clone(),
            k: r.k,
            heldout_nll: nll[i],
            delta_nll: nll[i] - nll[0],
            bigram_l1: l1[i],
            delta_l1: l1[i] - l1[0],
            relative_delta_l1: if l1[0] == 0.0 { 0.0 } else { (l1[i] - l1[0]) / l1[0] },
            samples_per_sec: r.throughput.iter().find(|t| t.k == r.k).map_or(f64::NAN, |t| t.samples_per_sec),
            rank_nll: rn[i],
            rank_l1: rl[i],
        })
        .collect();
    rows.sort_by_key(|r| r.rank_nll);
    Ok(rows)
}

pub fn write_comparison(rows: &[ComparisonRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "rank_nll\trank_l1\tlabel\tk\theldout_nll\tdelta_nll\tbigram_l1\tdelta_l1\trelative_delta_l1\tsamples_per_sec"
    )?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.3}",
            r.rank_nll,
            r.rank_l1,
            r.label,
            r.k,
            r.heldout_nll,
            r.delta_nll,
            r.bigram_l1,
            r.delta_l1,
            r.relative_delta_l1,
            r.samples_per_sec
        )?;
    }
    Ok(())
}
