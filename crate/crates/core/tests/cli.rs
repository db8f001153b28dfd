//! End-to-end command-line runs on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tensorar::cli::checkpoint;
use tensorar::cli::{self, config::Config, CHECKPOINT_FILE, HELDOUT_FILE, METRICS_FILE, TRAIN_FILE};
use tensorar::toydata;

const TINY: &str = "\
run.name = tiny
run.seed = 3
data.vocab_size = 6
data.height = 4
data.width = 4
data.num_classes = 2
data.train_count = 200
data.heldout_count = 40
model.k = 2
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
train.batch_size = 8
train.shard_size = 4
train.steps = 20
train.warmup_steps = 5
train.learning_rate = 0.003
train.eval_every = 10
train.eval_count = 20
train.checkpoint_every = 10
decode.num_samples = 4
eval.samples_per_class = 1000
bench.k_values = 1,2,4,8
bench.batch = 2
bench.repetitions = 1
";

fn setup(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{TINY}run.output_dir = {}\n", dir.join("runs").display())).unwrap();
    path
}

fn tensorar(cfg: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tensorar"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: std::process::Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config(cfg: &Path) -> Config {
    Config::from_text(&fs::read_to_string(cfg).unwrap()).unwrap()
}

#[test]
fn gen_data_is_byte_identical_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(tensorar(&cfg, &["gen-data", "--out", a.to_str().unwrap()]));
    ok(tensorar(&cfg, &["gen-data", "--out", b.to_str().unwrap()]));
    for name in [TRAIN_FILE, HELDOUT_FILE] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let train = toydata::read_dataset(fs::read(a.join(TRAIN_FILE)).unwrap().as_slice()).unwrap();
    let heldout = toydata::read_dataset(fs::read(a.join(HELDOUT_FILE)).unwrap().as_slice()).unwrap();
    assert_eq!((train.len(), heldout.len()), (200, 40));
    assert!(train.iter().all(|s| s.tokens.len() == 16 && s.tokens.iter().all(|&t| t < 6)));
    for c in 0..2 {
        assert!(train.iter().any(|s| s.class_label == c));
    }
    assert_ne!(train[..40], heldout[..]);
    // Training from the written splits matches training from the generator.
    let from_files = cli::load_splits(&{
        let mut c = config(&cfg);
        c.data_dir = a.display().to_string();
        c
    })
    .unwrap();
    assert_eq!(from_files, cli::load_splits(&config(&cfg)).unwrap());
}

#[test]
fn train_sample_trace_eval_bench_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let run = tmp.path().join("runs").join("tiny");
    ok(tensorar(&cfg, &["train"]));
    let metrics = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 20);
    assert_ne!(lines[9].split('\t').nth(3).unwrap(), "nan");
    assert_eq!(lines[0].split('\t').nth(3).unwrap(), "nan");

    ok(tensorar(&cfg, &["sample"]));
    for i in 0..4 {
        let grid = fs::read_to_string(run.join(format!("samples/sample_{i:04}.grid"))).unwrap();
        assert_eq!(grid.lines().count(), 4);
        assert!(fs::read(run.join(format!("samples/sample_{i:04}.pgm"))).unwrap().starts_with(b"P5\n4 4\n255\n"));
    }

    ok(tensorar(&cfg, &["trace"]));
    let first = fs::read(run.join("traces/trace_0000.tsv")).unwrap();
    ok(tensorar(&cfg, &["trace"]));
    assert_eq!(first, fs::read(run.join("traces/trace_0000.tsv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    let mut per_pos = vec![0usize; 16];
    for l in text.lines() {
        let f: Vec<usize> = l.split('\t').map(|x| x.parse().unwrap()).collect();
        per_pos[f[0]] += 1;
    }
    assert_eq!(per_pos, [1].into_iter().chain(std::iter::repeat_n(2, 15)).collect::<Vec<_>>());

    let stdout = ok(tensorar(&cfg, &["eval"]));
    assert!(stdout.starts_with("label\tk\tspec"));
    let c = config(&cfg);
    let stem = cli::report_stem(&c);
    let report = fs::read_to_string(run.join(format!("{stem}.txt"))).unwrap();
    let kv = tensorar::eval::parse_key_values(&report).unwrap();
    assert_eq!(kv["report.k"], "2");
    let nll: f64 = kv["heldout.clean.per_token"].parse().unwrap();
    assert!(nll.is_finite() && nll > 0.0);
    // Evaluation is reproducible from the checkpoint.
    ok(tensorar(&cfg, &["eval"]));
    let again = fs::read_to_string(run.join(format!("{stem}.txt"))).unwrap();
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("throughput.")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&report), strip(&again));

    let table = ok(tensorar(&cfg, &["bench", "--checkpoint", run.join(CHECKPOINT_FILE).to_str().unwrap()]));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(
        rows[1..].iter().map(|r| r.split('\t').nth(1).unwrap()).collect::<Vec<_>>(),
        vec!["1", "2", "4", "8"]
    );
    assert!(run.join(format!("bench_{}.tsv", c.hash())).exists());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    ok(tensorar(&cfg, &["train", "--train.steps", "5"]));
    let path = tmp.path().join("runs/tiny").join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.step, 5);
    assert_eq!(checkpoint::to_bytes(&ck), bytes);
    let again = checkpoint::from_bytes(&bytes).unwrap();
    assert!(ck.params.data.iter().zip(&again.params.data).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    ok(tensorar(&cfg, &["train", "--run.name", "full", "--train.steps", "30"]));
    ok(tensorar(&cfg, &["train", "--run.name", "split", "--train.steps", "12"]));
    ok(tensorar(&cfg, &["train", "--run.name", "split", "--train.steps", "30", "--resume"]));
    let load = |name: &str| checkpoint::load(&tmp.path().join("runs").join(name).join(CHECKPOINT_FILE)).unwrap();
    let (full, split) = (load("full"), load("split"));
    assert_eq!(split.step, 30);
    let max_diff = full
        .params
        .data
        .iter()
        .zip(&split.params.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff < 1e-5, "{max_diff}");
    let metrics = |name: &str| fs::read_to_string(tmp.path().join("runs").join(name).join(METRICS_FILE)).unwrap();
    let col = |s: String| s.lines().map(|l| l.split('\t').take(3).collect::<Vec<_>>().join("\t")).collect::<Vec<_>>();
    assert_eq!(col(metrics("full")), col(metrics("split")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    assert_eq!(tensorar(&cfg, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(tensorar(&cfg, &["train", "--train.bogus", "1"]).status.code(), Some(2));
    assert_eq!(tensorar(&cfg, &["train", "--model.n_heads", "3"]).status.code(), Some(2));
    assert_eq!(tensorar(&cfg, &["train", "--model.k", "zero"]).status.code(), Some(2));
    // No checkpoint yet.
    assert_eq!(tensorar(&cfg, &["sample"]).status.code(), Some(3));
    let missing = tmp.path().join("missing.cfg");
    assert_eq!(
        Command::new(env!("CARGO_BIN_EXE_tensorar"))
            .args(["--config", missing.to_str().unwrap(), "gradcheck"])
            .status()
            .unwrap()
            .code(),
        Some(2)
    );
    ok(tensorar(&cfg, &["train", "--train.steps", "2"]));
    // A checkpoint of another shape is refused.
    assert_eq!(tensorar(&cfg, &["sample", "--k", "4"]).status.code(), Some(2));
    let ck = tmp.path().join("runs/tiny").join(CHECKPOINT_FILE);
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ck, bytes).unwrap();
    assert_eq!(tensorar(&cfg, &["sample"]).status.code(), Some(3));
    assert_eq!(tensorar(&cfg, &["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = ok(tensorar(&cfg, &["gradcheck", "--k", "3"]));
    let err: f64 = out.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-3);
}

#[test]
fn leakage_probe_writes_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = ok(tensorar(&cfg, &["leakage-probe", "--train.steps", "10"]));
    let kv = tensorar::eval::parse_key_values(&out).unwrap();
    assert_eq!(kv["leakage.copy_rate_by_slot"].split(',').count(), 1);
    let mut c = config(&cfg);
    c.set("train.steps", "10").unwrap();
    assert!(tmp.path().join("runs/tiny").join(format!("leakage_{}_{}.txt", c.hash(), 3)).exists());
}
