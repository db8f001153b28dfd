//! Model checks against an independent naive transformer, causality,
//! incremental decoding, and gradient correctness.

mod common;

use common::{config, incremental_max_diff, random_params, random_tokens, reference_ar, reference_ar_loss, windows_of};
use tensorar::model::{self, ModelConfig, ModelParams, SequenceInput};
use tensorar::noise::{LossWeights, NoiseSchedule, ScheduleKind};
use tensorar::tensorize::{self, Window};
use tensorar::toydata::{self, TokenId};
use tensorar::train::{self, GradcheckConfig, GradcheckProblem};

#[test]
fn zero_gated_k1_matches_reference_ar_forward() {
    let cfg = config(1);
    let p = random_params(cfg, true, 1);
    for trial in 0..3u64 {
        let tokens = random_tokens(cfg.seq_len, cfg.vocab_size, 10 + trial);
        let class = trial as usize % cfg.num_classes;
        let out = model::forward(&p, class, &windows_of(&tokens, 1, cfg.vocab_size)).unwrap();
        let reference = reference_ar(&p, class, &tokens);
        for (row, r) in reference.iter().enumerate() {
            for (a, b) in out.slot(&cfg, row, 0).iter().zip(r) {
                assert!((a - b).abs() < 1e-9, "row {row}: {a} vs {b}");
            }
        }
        // Same check in single precision against the tolerance of record.
        let p32 = p.cast::<f32>();
        let out32 = model::forward(&p32, class, &windows_of(&tokens, 1, cfg.vocab_size)).unwrap();
        for (row, r) in reference.iter().enumerate() {
            for (a, b) in out32.slot(&cfg, row, 0).iter().zip(r) {
                assert!((*a as f64 - b).abs() < 1e-5, "row {row}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn k1_noise_off_loss_matches_reference_ar_loss() {
    let cfg = config(1);
    let p = random_params(cfg, true, 2);
    let spec = toydata::make_spec(cfg.vocab_size, 3, 4, cfg.num_classes, 3).unwrap();
    let samples = toydata::generate_dataset(&spec, 5, 4, 0).unwrap();
    let off = NoiseSchedule::none(1).unwrap();
    let prepared: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| train::prepare_sample(s, 1, cfg.vocab_size, &off, i as u64).unwrap())
        .collect();
    let (out, _) = train::batch_gradient(&p, &prepared, &LossWeights::uniform(1), 2).unwrap();
    let reference = reference_ar_loss(&p, &samples);
    assert!((out.loss - reference).abs() < 1e-9, "{} vs {reference}", out.loss);
}

#[test]
fn zero_gates_make_every_slot_the_plain_head() {
    let cfg = config(4);
    let p = random_params(cfg, true, 3);
    let tokens = random_tokens(cfg.seq_len, cfg.vocab_size, 5);
    let out = model::forward(&p, 1, &windows_of(&tokens, 4, cfg.vocab_size)).unwrap();
    for row in 0..cfg.seq_len {
        for j in 1..4 {
            assert_eq!(out.slot(&cfg, row, j), out.slot(&cfg, row, 0));
        }
    }
    // The encoder reduces to the first symbol's embedding.
    let w = Window::new(vec![2, 5, 1, 6]);
    let enc = model::encode_window(&p, &w).unwrap();
    let d = cfg.d_model;
    assert_eq!(enc, p.tensor("token_embedding").unwrap()[2 * d..3 * d].to_vec());
}

#[test]
fn outputs_are_causal_in_the_input_windows() {
    for k in [1, 2, 4] {
        let cfg = config(k);
        let p = random_params(cfg, false, 4 + k as u64);
        let tokens = random_tokens(cfg.seq_len, cfg.vocab_size, 7);
        let base_w = windows_of(&tokens, k, cfg.vocab_size);
        let base = model::forward(&p, 0, &base_w).unwrap();
        for changed in 0..cfg.seq_len {
            let mut w = base_w.clone();
            // Change a non-padding symbol of input window `changed`.
            let slot = w[changed].tokens.iter().position(|&x| x as usize != cfg.vocab_size).unwrap();
            w[changed].tokens[slot] = (w[changed].tokens[slot] + 1) % cfg.vocab_size as TokenId;
            let out = model::forward(&p, 0, &w).unwrap();
            for row in 0..cfg.seq_len {
                let same = (0..k).all(|j| out.slot(&cfg, row, j) == base.slot(&cfg, row, j));
                // Row `row` reads windows 0..row only.
                assert_eq!(same, row <= changed, "k={k} changed={changed} row={row}");
            }
        }
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig {
        vocab_size: 16,
        k: 4,
        seq_len: 64,
        d_model: 128,
        n_layers: 4,
        n_heads: 4,
        d_q: 1,
        num_classes: 4,
        seed: 0,
    };
    let (v, k, t, d, l, c) = (16, 4, 64, 128, 4, 4);
    let ln = 2 * d;
    let lin = |i: usize, o: usize| i * o + o;
    let embeddings = (v + 1) * d + c * d + t * d;
    let block = ln + lin(d, 3 * d) + lin(d, d) + ln + lin(d, 4 * d) + lin(4 * d, d);
    let q_in = d + k * d + (ln + 4 * lin(d, d)) + ln + lin(d, d) + lin(d, d) + d * d;
    let q_out = k * d + 2 * lin(d, d) + ln + lin(d, d) + lin(d, d) + d * d;
    let expected = embeddings + l * block + ln + q_in + q_out + lin(d, v);
    let p = ModelParams::<f32>::init(cfg).unwrap();
    assert_eq!(p.num_params(), expected);
    assert_eq!(expected, 1_006_096);
}

fn check_incremental<F: tensorar::linalg::Real>(p: &ModelParams<F>, tol: f64, seed_value: u64) {
    let diff = incremental_max_diff(p, seed_value);
    assert!(diff < tol, "k={}: diff {diff}", p.config.k);
}

#[test]
fn incremental_matches_full_forward() {
    for k in [1, 2, 4, 8] {
        let cfg = config(k);
        let p = random_params(cfg, false, 30 + k as u64);
        check_incremental(&p, 1e-10, k as u64);
        let mut p32 = ModelParams::<f32>::init(cfg).unwrap();
        p32.randomize_gates(0.5, k as u64);
        check_incremental(&p32, 1e-5, 100 + k as u64);
        check_incremental(&p.cast::<f32>(), 1e-5, 200 + k as u64);
    }
}

#[test]
fn decode_state_rejects_misuse() {
    let cfg = config(2);
    let p = ModelParams::<f32>::init(cfg).unwrap();
    assert!(model::DecodeState::new(&p, 3).is_err());
    let mut s = model::DecodeState::new(&p, 0).unwrap();
    assert!(model::forward_step(&p, &mut s, &[0, 1]).is_err());
    model::forward_class_step(&p, &mut s).unwrap();
    assert!(model::forward_class_step(&p, &mut s).is_err());
    assert!(model::forward_step(&p, &mut s, &[0, 1, 2]).is_err());
    assert!(model::forward_step(&p, &mut s, &[0, 9]).is_err());
}

#[test]
fn gradcheck_tiny_model() {
    let report = train::gradcheck(&GradcheckConfig::tiny()).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert!(report.checked >= 200);
}

#[test]
fn gradcheck_k1_and_wide_windows() {
    for k in [1, 4] {
        let report = train::gradcheck(&GradcheckConfig::tiny_with_k(k)).unwrap();
        assert!(report.max_rel_error < 1e-3, "k={k}: {report:?}");
    }
}

#[test]
fn gradcheck_detects_a_broken_gradient() {
    let cfg = GradcheckConfig::tiny();
    let problem = GradcheckProblem::new(&cfg).unwrap();
    let mut grad = problem.analytic_gradient(&problem.params);
    // Drop the gradient of the output decoder's gate.
    let r = problem.params.layout.entry("q_out.gate.w").unwrap().range.clone();
    grad[r].iter_mut().for_each(|g| *g = 0.0);
    let report = train::gradcheck_with(&problem, &cfg, &grad);
    assert!(report.max_rel_error > 1e-1, "{report:?}");
    assert!(report.worst_param.starts_with("q_out.gate.w"));
}

#[test]
fn masked_cells_never_reach_gradients() {
    let cfg = GradcheckConfig::tiny_with_k(3);
    let problem = GradcheckProblem::new(&cfg).unwrap();
    let params = &problem.params;
    let inputs: Vec<SequenceInput> = problem
        .batch
        .iter()
        .map(|p| SequenceInput {
            class_label: p.class_label,
            windows: &p.windowed.inputs,
        })
        .collect();
    let (logits, cache) = model::forward_batch(params, &inputs).unwrap();
    let targets: Vec<TokenId> = problem.batch.iter().flat_map(|p| p.targets.clone()).collect();
    let mask: Vec<bool> = problem.batch.iter().flat_map(|p| p.mask.clone()).collect();
    let v = cfg.model.vocab_size;
    let (_, dl) = train::loss_and_grad(&logits, &targets, &mask, &problem.weights, v).unwrap();
    let mut zeroed = logits.clone();
    for (cell, &m) in mask.iter().enumerate() {
        if !m {
            zeroed[cell * v..(cell + 1) * v].fill(0.0);
        }
    }
    let (_, dz) = train::loss_and_grad(&zeroed, &targets, &mask, &problem.weights, v).unwrap();
    assert!(dl.iter().zip(&dz).all(|(a, b)| (a - b).abs() < 1e-12));
    let ga = model::backward_batch(params, &cache, &dl);
    let gb = model::backward_batch(params, &cache, &dz);
    assert!(ga.iter().zip(&gb).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(mask.iter().any(|m| !m));
}

#[test]
fn shard_order_does_not_change_gradients() {
    let cfg = config(4);
    let mut p = ModelParams::<f32>::init(cfg).unwrap();
    p.randomize_gates(0.2, 3);
    let spec = toydata::make_spec(cfg.vocab_size, 3, 4, cfg.num_classes, 8).unwrap();
    let samples = toydata::generate_dataset(&spec, 6, 1, 0).unwrap();
    let schedule = NoiseSchedule::new(ScheduleKind::Sine, 4).unwrap();
    let prepared: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| train::prepare_sample(s, 4, cfg.vocab_size, &schedule, i as u64).unwrap())
        .collect();
    let w = LossWeights::uniform(4);
    let (a, ga) = train::shard_gradients(&p, &[&prepared[..2], &prepared[2..]], &w).unwrap();
    let (b, gb) = train::shard_gradients(&p, &[&prepared[2..], &prepared[..2]], &w).unwrap();
    let (c, gc) = train::batch_gradient(&p, &prepared, &w, 6).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-5 && (a.loss - c.loss).abs() < 1e-5);
    for ((x, y), z) in ga.iter().zip(&gb).zip(&gc) {
        assert!((x - y).abs() < 1e-5 && (x - z).abs() < 1e-5);
    }
}

#[test]
fn permuting_slot_queries_permutes_slot_outputs() {
    let cfg = config(3);
    let mut p = random_params(cfg, false, 40);
    let h: Vec<f64> = random_tokens(cfg.d_model, 7, 41).iter().map(|&x| x as f64 * 0.3 - 1.0).collect();
    let base = model::decode_hidden(&p, &h).unwrap();
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let perm = [2, 0, 1];
    let q = p.tensor("q_out.slot_queries").unwrap().to_vec();
    let dst = p.tensor_mut("q_out.slot_queries").unwrap();
    for (j, &src) in perm.iter().enumerate() {
        dst[j * d..(j + 1) * d].copy_from_slice(&q[src * d..(src + 1) * d]);
    }
    let permuted = model::decode_hidden(&p, &h).unwrap();
    for (j, &src) in perm.iter().enumerate() {
        assert_eq!(&permuted[j * v..(j + 1) * v], &base[src * v..(src + 1) * v]);
    }
    assert!(model::decode_hidden(&p, &h[1..]).is_err());
}

#[test]
fn later_window_symbols_matter_once_gates_open() {
    let cfg = config(4);
    let mut p = ModelParams::<f64>::init(cfg).unwrap();
    let a = Window::new(vec![1, 2, 3, 4]);
    let b = Window::new(vec![1, 2, 0, 4]);
    assert_eq!(model::encode_window(&p, &a).unwrap(), model::encode_window(&p, &b).unwrap());
    p.randomize_gates(0.1, 9);
    assert_ne!(model::encode_window(&p, &a).unwrap(), model::encode_window(&p, &b).unwrap());
}

#[test]
fn identical_batch_rows_give_identical_outputs() {
    let cfg = config(2);
    let mut p = ModelParams::<f32>::init(cfg).unwrap();
    p.randomize_gates(0.3, 1);
    let ws = tensorize::to_windows(&random_tokens(cfg.seq_len, cfg.vocab_size, 3), 2, cfg.vocab_size).unwrap();
    let input = SequenceInput {
        class_label: 2,
        windows: &ws.inputs,
    };
    let (logits, _) = model::forward_batch(&p, &[input, input]).unwrap();
    let half = logits.len() / 2;
    assert_eq!(&logits[..half], &logits[half..]);
}
