//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails. Criteria run one after another so their
//! wall-clock budgets are measured without contention.
//!
//! `ACCEPTANCE_ONLY=1,2,5` restricts a run to the listed criteria.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::time::{Duration, Instant};

use common::{incremental_max_diff, random_params, random_tokens, reference_ar, reference_ar_loss, windows_of};
use tensorar::cli::{self, checkpoint, config::Config, CHECKPOINT_FILE, HELDOUT_FILE, TRAIN_FILE};
use tensorar::decode::{self, DecodeConfig};
use tensorar::eval;
use tensorar::model::{self, ModelConfig, ModelParams};
use tensorar::noise::{self, LossWeights, NoiseSchedule, ScheduleKind};
use tensorar::seed::{self, Stream};
use tensorar::toydata::{self, TokenId};
use tensorar::train::{self, GradcheckConfig, Optimizer, TrainConfig};

const SEEDS: [u64; 3] = [1, 2, 3];

/// Leakage-probe runs (six in total) use a narrower one-layer model so that
/// the noise-free run reaches its copying optimum within the time budget.
const LEAKAGE_STEPS: usize = 2200;
const LEAKAGE_LR: f64 = 1e-2;
const LEAKAGE_WARMUP: usize = 100;
const LEAKAGE_D_MODEL: usize = 32;
const LEAKAGE_LAYERS: usize = 1;
/// Training steps of each quality run, identical for k = 1 and k = 4.
const QUALITY_STEPS: usize = 3000;
const QUALITY_LR: f64 = 2e-3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn selected(id: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|x| x.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn run(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) -> bool {
    if !selected(id) {
        return true;
    }
    let start = Instant::now();
    let v = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let pass = v.pass && in_time;
    // Written to the raw stream so the line shows even when the harness
    // captures test output.
    let _ = writeln!(
        std::io::stderr(),
        "{} criterion {id:2} {name}: {} [{:.1}s of {}s{}]",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

/// Default data spec and model shape of the command-line tool.
fn default_config() -> Config {
    Config::default()
}

fn default_model(k: usize, seed_value: u64) -> ModelConfig {
    let mut c = default_config();
    c.k = k;
    c.seed = seed_value;
    c.model_config().unwrap()
}

fn criterion_1() -> Verdict {
    // Small reference in f64 for the loss, the default shape in f32 for logits.
    let cfg = common::config(1);
    let p = random_params(cfg, true, 2);
    let spec = toydata::make_spec(cfg.vocab_size, 3, 4, cfg.num_classes, 3).unwrap();
    let samples = toydata::generate_dataset(&spec, 6, 4, 0).unwrap();
    let off = NoiseSchedule::none(1).unwrap();
    let prepared: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| train::prepare_sample(s, 1, cfg.vocab_size, &off, i as u64).unwrap())
        .collect();
    let (out, _) = train::batch_gradient(&p, &prepared, &LossWeights::uniform(1), 4).unwrap();
    let loss_diff = (out.loss - reference_ar_loss(&p, &samples)).abs();

    let big = default_model(1, 7);
    let p64 = random_params(big, true, 8);
    let p32 = p64.cast::<f32>();
    let mut logit_diff = 0.0f64;
    for trial in 0..2u64 {
        let tokens = random_tokens(big.seq_len, big.vocab_size, 20 + trial);
        let class = trial as usize;
        let reference = reference_ar(&p64, class, &tokens);
        let got = model::forward(&p32, class, &windows_of(&tokens, 1, big.vocab_size)).unwrap();
        for (row, r) in reference.iter().enumerate() {
            for (a, b) in got.slot(&big, row, 0).iter().zip(r) {
                logit_diff = logit_diff.max((*a as f64 - b).abs());
            }
        }
    }
    verdict(
        loss_diff < 1e-9 && logit_diff < 1e-5,
        format!("loss diff {loss_diff:.2e} (< 1e-9), zero-gated logit diff {logit_diff:.2e} (< 1e-5)"),
    )
}

fn criterion_2() -> Verdict {
    let (v, draws) = (16usize, 100_000usize);
    let mut worst = 0.0f64;
    for kind in ScheduleKind::NOISY {
        for k in [2, 4, 8] {
            let schedule = NoiseSchedule::new(kind, k).unwrap();
            let window: Vec<TokenId> = (0..k).map(|j| (j % v) as TokenId).collect();
            let mut kept = vec![0usize; k];
            for i in 0..draws {
                let s = seed::derive(2024, Stream::Probe, i as u64);
                let out = noise::corrupt_window(&window, &schedule, v, s);
                for j in 0..k {
                    kept[j] += (out[j] == window[j]) as usize;
                }
            }
            for j in 0..k {
                let beta = schedule.beta(j).unwrap();
                let want = (1.0 - beta) + beta / v as f64;
                worst = worst.max((kept[j] as f64 / draws as f64 - want).abs());
            }
        }
    }
    verdict(worst <= 0.01, format!("max |empirical − (1−β)−β/V| = {worst:.4} (≤ 0.01) at 1e5 draws"))
}

fn criterion_3() -> Verdict {
    let mut bad = Vec::new();
    for kind in ScheduleKind::NOISY {
        for k in 1..=64 {
            let b = NoiseSchedule::new(kind, k).unwrap().betas();
            let endpoints = b[0] == 0.0 && (k < 2 || b[k - 1] == 1.0);
            let monotone = b.windows(2).all(|w| w[1] >= w[0]);
            if !endpoints || !monotone {
                bad.push(format!("{kind} k={k}"));
            }
        }
    }
    verdict(bad.is_empty(), format!("4 schedules × k = 1..64, violations: {bad:?}"))
}

fn criterion_4() -> Verdict {
    let mut worst = (0.0f64, String::new());
    for k in [1, 2, 4] {
        let r = train::gradcheck(&GradcheckConfig::tiny_with_k(k)).unwrap();
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, format!("k={k} {}", r.worst_param));
        }
    }
    verdict(worst.0 < 1e-3, format!("max relative error {:.2e} (< 1e-3) at {}", worst.0, worst.1))
}

fn criterion_5() -> Verdict {
    let mut worst = 0.0f64;
    for k in [1, 2, 4, 8] {
        let mut p = ModelParams::<f32>::init(default_model(k, 5)).unwrap();
        p.randomize_gates(0.3, k as u64);
        for s in 0..2 {
            worst = worst.max(incremental_max_diff(&p, 10 * k as u64 + s));
        }
    }
    verdict(worst < 1e-5, format!("max |cached − full| = {worst:.2e} (< 1e-5), k ∈ {{1,2,4,8}}"))
}

fn default_splits() -> (Vec<toydata::Sample>, Vec<toydata::Sample>) {
    cli::load_splits(&default_config()).unwrap()
}

fn criterion_6() -> Verdict {
    let c = default_config();
    let (train_set, heldout) = default_splits();
    let heldout = &heldout[..200];
    let mut all_pass = true;
    let mut detail = String::new();
    for s in SEEDS {
        let mut tc = TrainConfig::new(c.k).unwrap();
        tc.steps = LEAKAGE_STEPS;
        tc.learning_rate = LEAKAGE_LR;
        tc.warmup_steps = LEAKAGE_WARMUP;
        tc.seed = s;
        let mut mc = default_model(c.k, s);
        mc.d_model = LEAKAGE_D_MODEL;
        mc.n_layers = LEAKAGE_LAYERS;
        let (noised, clean) = train::train_leakage_pair(mc, &tc, &train_set).unwrap();
        let r = train::leakage_probe(&noised, &clean, heldout, &tc.schedule, seed::derive(s, Stream::Probe, 0)).unwrap();
        let copies = r.copy_rate_by_slot.iter().all(|&x| x > 0.95);
        let lower = r.newtoken_nll_noised < r.newtoken_nll_clean;
        all_pass &= copies && lower;
        let _ = write!(
            detail,
            "seed {s}: copy {:?} newtoken noised {:.3} vs clean {:.3}; ",
            r.copy_rate_by_slot.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
            r.newtoken_nll_noised,
            r.newtoken_nll_clean
        );
    }
    verdict(all_pass, detail.trim_end_matches("; ").to_string())
}

struct Quality {
    nll: f64,
    nll_noised: f64,
    l1: f64,
    gap: f64,
}

fn quality_run(k: usize, s: u64, train_set: &[toydata::Sample], heldout: &[toydata::Sample]) -> Quality {
    let c = default_config();
    let mut p = ModelParams::<f32>::init(default_model(k, s)).unwrap();
    let mut opt = Optimizer::new(&p);
    let mut tc = TrainConfig::new(k).unwrap();
    tc.steps = QUALITY_STEPS;
    tc.learning_rate = QUALITY_LR;
    tc.seed = s;
    train::train(&mut p, &mut opt, train_set, &[], &tc, 0, |_, _, _| Ok(())).unwrap();
    let h = eval::heldout_nll(&p, heldout, &tc.schedule, seed::derive(s, Stream::Corrupt, 0)).unwrap();
    let spec = c.spec().unwrap();
    let d = eval::divergence_all_classes(&p, &spec, c.samples_per_class, &DecodeConfig::new(spec.vocab_size, s)).unwrap();
    Quality {
        nll: h.clean.per_token,
        nll_noised: h.noised.per_token,
        l1: d.bigram_l1,
        gap: d.exact_nll_gap,
    }
}

fn criterion_7() -> Verdict {
    let (train_set, heldout) = default_splits();
    let (mut wins_a, mut wins_b) = (0, 0);
    let mut detail = String::new();
    for s in SEEDS {
        let base = quality_run(1, s, &train_set, &heldout);
        let ours = quality_run(4, s, &train_set, &heldout);
        let a = ours.nll <= base.nll;
        let b = ours.l1 <= 0.95 * base.l1;
        wins_a += a as usize;
        wins_b += b as usize;
        let _ = write!(
            detail,
            "seed {s}: nll {:.4} vs {:.4} (noised-input {:.4}), L1 {:.4} vs {:.4}, gap {:.2} vs {:.2}; ",
            ours.nll, base.nll, ours.nll_noised, ours.l1, base.l1, ours.gap, base.gap
        );
    }
    let _ = write!(detail, "(a) {wins_a}/3, (b) {wins_b}/3");
    verdict(wins_a >= 2 && wins_b >= 2, detail)
}

fn criterion_8() -> Verdict {
    let mut p = ModelParams::<f32>::init(default_model(4, 3)).unwrap();
    p.randomize_gates(0.3, 3);
    let (t_len, k, v) = (p.config.seq_len, 4, p.config.vocab_size);
    let mut problems = 0usize;
    for i in 0..100u64 {
        let cfg = DecodeConfig::new(v, decode::sample_seed(8, i));
        let (tokens, trace) = decode::generate(&p, (i % 4) as usize, &cfg).unwrap();
        for pos in 0..t_len {
            let h = &trace.history[pos];
            let count_ok = decode::refine_count(&trace, pos).unwrap() == (pos + 1).min(k);
            let last_ok = h.last().map(|x| x.1) == Some(tokens[pos]);
            problems += (!count_ok || !last_ok) as usize;
        }
    }
    verdict(problems == 0, format!("100 decodes × {t_len} positions, {problems} violations"))
}

fn criterion_9() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = default_config();
    c.output_dir = tmp.path().to_path_buf();
    c.steps = 200;
    c.checkpoint_every = 100;
    c.eval_every = 0;
    c.num_samples = 4;
    let mut notes = Vec::new();

    let (a, b) = (tmp.path().join("data_a"), tmp.path().join("data_b"));
    cli::cmd_gen_data(&c, Some(&a)).unwrap();
    cli::cmd_gen_data(&c, Some(&b)).unwrap();
    let data_same = [TRAIN_FILE, HELDOUT_FILE]
        .iter()
        .all(|n| fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap());
    notes.push(format!("data identical {data_same}"));

    c.run_name = "full".into();
    let full = cli::cmd_train(&c, false).unwrap();
    let ck_path = c.run_dir().join(CHECKPOINT_FILE);
    let bytes = fs::read(&ck_path).unwrap();
    let loaded = checkpoint::load(&ck_path).unwrap();
    let round_trip = checkpoint::to_bytes(&loaded) == bytes
        && loaded.params.data.iter().zip(&full.params.data).all(|(x, y)| x.to_bits() == y.to_bits());
    notes.push(format!("checkpoint bit-exact {round_trip}"));

    let traces = |c: &Config| {
        cli::cmd_trace(c, None).unwrap();
        (0..c.num_samples)
            .map(|i| fs::read(c.run_dir().join(format!("traces/trace_{i:04}.tsv"))).unwrap())
            .collect::<Vec<_>>()
    };
    let traces_same = traces(&c) == traces(&c);
    notes.push(format!("traces identical {traces_same}"));

    c.run_name = "split".into();
    c.steps = 100;
    cli::cmd_train(&c, false).unwrap();
    c.steps = 200;
    let resumed = cli::cmd_train(&c, true).unwrap();
    let diff = full
        .params
        .data
        .iter()
        .zip(&resumed.params.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    notes.push(format!("resume max diff {diff:.2e} (< 1e-5)"));
    verdict(data_same && round_trip && traces_same && diff < 1e-5, notes.join(", "))
}

fn criterion_10() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = default_config();
    c.output_dir = tmp.path().to_path_buf();
    let rows = cli::cmd_bench(&c, None).unwrap();
    let ms = |k: usize| rows.iter().find(|r| r.k == k).unwrap().ms_per_step;
    let overhead = ms(8) / ms(1) - 1.0;
    let table = fs::read_to_string(c.run_dir().join(format!("bench_{}.tsv", c.hash()))).unwrap();
    verdict(
        rows.len() == c.bench_k_values.len() && overhead <= 0.5,
        format!(
            "k=1 {:.4} ms/step, k=8 {:.4} ms/step, overhead {:.1}% (≤ 50%), table rows {}",
            ms(1),
            ms(8),
            overhead * 100.0,
            table.lines().count() - 1
        ),
    )
}

#[test]
fn acceptance() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let results = [
        run(1, "k=1 reduces to plain AR", min(1), criterion_1),
        run(2, "noising law", min(1), criterion_2),
        run(3, "schedule endpoints and monotonicity", min(1), criterion_3),
        run(4, "gradient correctness", min(5), criterion_4),
        run(5, "incremental decoding", min(1), criterion_5),
        run(6, "leakage collapse", min(30), criterion_6),
        run(7, "quality versus k=1 baseline", min(120), criterion_7),
        run(8, "trace structure", min(1), criterion_8),
        run(9, "determinism and persistence", min(10), criterion_9),
        run(10, "throughput harness", min(10), criterion_10),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
