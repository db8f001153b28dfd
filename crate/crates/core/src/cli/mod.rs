//! Command-line front end.
//!
//! Every command reads a [`Config`]: defaults, then an optional
//! `--config FILE`, then `--section.key value` overrides (`--k` is short
//! for `--model.k`). Outputs land under `output_dir/run_name`.

pub mod checkpoint;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use config::Config;

use crate::decode::{self, ThroughputRow};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::ModelParams;
use crate::seed::{self, Stream};
use crate::toydata::{self, Sample, HELDOUT_INDEX_OFFSET};
use crate::train::{self, GradcheckConfig, MetricsRecord, Optimizer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const TRAIN_FILE: &str = "train.tsv";
pub const HELDOUT_FILE: &str = "heldout.tsv";

#[derive(Debug, Parser)]
#[command(name = "tensorar", about = "Overlapping next-window autoregressive modeling on synthetic grids")]
struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the training and held-out splits.
    GenData {
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, checkpointing periodically.
    Train {
        /// Continue from the run's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Decode samples and write grids.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode samples and write refinement traces.
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Held-out NLL, sample divergence and throughput report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode latency table over window sizes.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a tiny model.
    Gradcheck,
    /// Train a noised run and its noise-free twin and compare them.
    LeakageProbe,
}

/// Splits `--section.key value` / `--section.key=value` overrides (and
/// `--k`) from the arguments clap should see.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        let Some(flag) = s.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = if key == "k" { "model.k".to_string() } else { key };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .map(|v| v.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Parses arguments (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let config = match load_config(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli.command, &config) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
    let mut c = Config::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
        c.apply_text(&text)?;
    }
    for (k, v) in overrides {
        c.set(k, v)?;
    }
    c.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(c)
}

fn dispatch(cmd: &Command, config: &Config) -> Result<()> {
    match cmd {
        Command::GenData { out } => cmd_gen_data(config, out.as_deref()),
        Command::Train { resume } => cmd_train(config, *resume).map(|_| ()),
        Command::Sample { checkpoint } => cmd_sample(config, checkpoint.as_deref()),
        Command::Trace { checkpoint } => cmd_trace(config, checkpoint.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(config, checkpoint.as_deref()).map(|_| ()),
        Command::Bench { checkpoint } => cmd_bench(config, checkpoint.as_deref()).map(|_| ()),
        Command::Gradcheck => cmd_gradcheck(config),
        Command::LeakageProbe => cmd_leakage_probe(config),
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

fn render(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

/// Training and held-out splits, read from `data.dir` or generated.
pub fn load_splits(config: &Config) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if config.data_dir.is_empty() {
        let spec = config.spec()?;
        let train = toydata::generate_dataset(&spec, config.train_count, config.data_seed, 0)?;
        let heldout = toydata::generate_dataset(&spec, config.heldout_count, config.data_seed, HELDOUT_INDEX_OFFSET)?;
        return Ok((train, heldout));
    }
    let read = |name: &str| -> Result<Vec<Sample>> {
        let p = Path::new(&config.data_dir).join(name);
        let f = fs::File::open(&p).map_err(|e| Error::file(&p, e))?;
        toydata::read_dataset(std::io::BufReader::new(f))
    };
    Ok((read(TRAIN_FILE)?, read(HELDOUT_FILE)?))
}

pub fn cmd_gen_data(config: &Config, out: Option<&Path>) -> Result<()> {
    let dir = out.map_or_else(|| config.run_dir(), Path::to_path_buf);
    let spec = config.spec()?;
    for (name, count, offset) in [
        (TRAIN_FILE, config.train_count, 0),
        (HELDOUT_FILE, config.heldout_count, HELDOUT_INDEX_OFFSET),
    ] {
        let samples = toydata::generate_dataset(&spec, count, config.data_seed, offset)?;
        write_atomic(&dir.join(name), &render(|b| toydata::write_dataset(&samples, b)))?;
        println!("{}: {count} records", dir.join(name).display());
    }
    Ok(())
}

fn checkpoint_path(config: &Config, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| config.run_dir().join(CHECKPOINT_FILE), Path::to_path_buf)
}

/// Loads a checkpoint and checks that it matches the configured model.
pub fn load_model(config: &Config, explicit: Option<&Path>) -> Result<Checkpoint> {
    let ck = checkpoint::load(&checkpoint_path(config, explicit))?;
    if ck.config.model_config()? != config.model_config()? {
        return Err(Error::Usage(
            "checkpoint was trained with a different model configuration".into(),
        ));
    }
    Ok(ck)
}

/// Trains (or resumes) the configured run. Returns the final checkpoint.
pub fn cmd_train(config: &Config, resume: bool) -> Result<Checkpoint> {
    let dir = config.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let tc = config.train_config()?;
    let (train_set, heldout) = load_splits(config)?;
    let heldout: Vec<Sample> = heldout.into_iter().take(config.eval_count).collect();
    let ck_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);

    let (mut params, mut opt, start) = if resume {
        let ck = load_model(config, None)?;
        let opt = ck
            .optimizer
            .ok_or_else(|| Error::State("checkpoint has no optimizer state to resume from".into()))?;
        (ck.params, opt, ck.step)
    } else {
        let params = ModelParams::<f32>::init(config.model_config()?)?;
        let opt = Optimizer::new(&params);
        (params, opt, 0)
    };
    let mut metrics = if resume && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::file(&metrics_path, e))?;
        // Keep only records of steps that the checkpoint already covers.
        text.lines()
            .filter(|l| l.split('\t').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < start))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    } else {
        String::new()
    };

    let every = config.checkpoint_every;
    train::train(&mut params, &mut opt, &train_set, &heldout, &tc, start, |rec: &MetricsRecord, p, o| {
        metrics.push_str(&rec.to_line());
        metrics.push('\n');
        let done = rec.step + 1;
        if (every > 0 && done % every == 0) || done == tc.steps {
            let ck = Checkpoint {
                config: config.clone(),
                params: p.clone(),
                optimizer: Some(o.clone()),
                step: done,
            };
            checkpoint::save(&ck_path, &ck)?;
            write_atomic(&metrics_path, metrics.as_bytes())?;
        }
        Ok(())
    })?;
    println!("{}: step {}", ck_path.display(), tc.steps.max(start));
    Ok(Checkpoint {
        config: config.clone(),
        params,
        optimizer: Some(opt),
        step: tc.steps.max(start),
    })
}

pub fn cmd_sample(config: &Config, ck: Option<&Path>) -> Result<()> {
    let ck = load_model(config, ck)?;
    let dc = config.decode_config()?;
    let dir = config.run_dir().join("samples");
    let mut all = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let class = i % config.num_classes;
        let (tokens, _) = decode::generate(&ck.params, class, &dc.with_seed(decode::sample_seed(dc.seed, i as u64)))?;
        write_atomic(
            &dir.join(format!("sample_{i:04}.grid")),
            &render(|b| decode::write_grid(&tokens, config.width, b)),
        )?;
        write_atomic(
            &dir.join(format!("sample_{i:04}.pgm")),
            &render(|b| decode::write_pgm(&tokens, config.width, config.vocab_size, b)),
        )?;
        all.push(Sample {
            class_label: class,
            tokens,
        });
    }
    write_atomic(&dir.join("samples.tsv"), &render(|b| toydata::write_dataset(&all, b)))?;
    println!("{}: {} samples", dir.display(), all.len());
    Ok(())
}

pub fn cmd_trace(config: &Config, ck: Option<&Path>) -> Result<()> {
    let ck = load_model(config, ck)?;
    let dc = config.decode_config()?;
    let dir = config.run_dir().join("traces");
    for i in 0..config.num_samples {
        let class = i % config.num_classes;
        let (tokens, trace) = decode::generate(&ck.params, class, &dc.with_seed(decode::sample_seed(dc.seed, i as u64)))?;
        write_atomic(
            &dir.join(format!("trace_{i:04}.tsv")),
            &render(|b| trace.write_lines(b)),
        )?;
        write_atomic(
            &dir.join(format!("trace_{i:04}.grid")),
            &render(|b| decode::write_grid(&tokens, config.width, b)),
        )?;
    }
    println!("{}: {} traces", dir.display(), config.num_samples);
    Ok(())
}

fn bench_rows(config: &Config, params: &ModelParams<f32>) -> Result<Vec<ThroughputRow>> {
    decode::throughput_bench(
        &[(format!("k{}", params.config.k), params.clone())],
        config.bench_batch,
        config.bench_repetitions,
        config.seed,
    )
}

/// Builds the evaluation report of a trained model.
pub fn evaluate(config: &Config, params: &ModelParams<f32>) -> Result<EvalReport> {
    let spec = config.spec()?;
    let (_, heldout) = load_splits(config)?;
    let schedule = config.schedule()?;
    let heldout_nll = eval::heldout_nll(params, &heldout, &schedule, seed::derive(config.seed, Stream::Corrupt, 0))?;
    let dc = config.decode_config()?;
    let div = eval::divergence_all_classes(params, &spec, config.samples_per_class, &dc)?;
    let report = EvalReport {
        label: config.run_name.clone(),
        spec_fingerprint: eval::spec_fingerprint(&spec),
        seed: config.seed,
        k: config.k,
        heldout: heldout_nll,
        bigram_l1: div.bigram_l1,
        exact_nll_gap: div.exact_nll_gap,
        throughput: bench_rows(config, params)?,
        config_echo: config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    report.validate()?;
    Ok(report)
}

/// File stem shared by a run's report files.
pub fn report_stem(config: &Config) -> String {
    format!("eval_{}_{}", config.hash(), config.seed)
}

pub fn cmd_eval(config: &Config, ck: Option<&Path>) -> Result<EvalReport> {
    let ck = load_model(config, ck)?;
    let report = evaluate(config, &ck.params)?;
    let dir = config.run_dir();
    let stem = report_stem(config);
    write_atomic(&dir.join(format!("{stem}.txt")), report.to_text().as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.tsv")), report.to_tsv().as_bytes())?;
    print!("{}", report.to_tsv());
    Ok(report)
}

/// Latency table over `bench.k_values`. A checkpoint, when present, is
/// used for its own `k`; other rows use fresh weights of the same shape.
pub fn cmd_bench(config: &Config, ck: Option<&Path>) -> Result<Vec<ThroughputRow>> {
    let trained = match ck {
        Some(p) => Some(load_model(config, Some(p))?.params),
        None => None,
    };
    let mut models = Vec::with_capacity(config.bench_k_values.len());
    for &k in &config.bench_k_values {
        let mut c = config.clone();
        c.k = k;
        let params = match &trained {
            Some(p) if p.config.k == k => p.clone(),
            _ => ModelParams::<f32>::init(c.model_config().map_err(|e| Error::Usage(e.to_string()))?)?,
        };
        models.push((format!("k{k}"), params));
    }
    let rows = decode::throughput_bench(&models, config.bench_batch, config.bench_repetitions, config.seed)?;
    let table = render(|b| decode::write_throughput_table(&rows, b));
    write_atomic(&config.run_dir().join(format!("bench_{}.tsv", config.hash())), &table)?;
    std::io::stdout().write_all(&table)?;
    Ok(rows)
}

pub fn cmd_gradcheck(config: &Config) -> Result<()> {
    let mut cfg = GradcheckConfig::tiny_with_k(config.k.min(6));
    cfg.seed = config.seed;
    let report = train::gradcheck(&cfg)?;
    println!(
        "max_rel_error\t{:.3e}\tworst\t{}\tchecked\t{}",
        report.max_rel_error, report.worst_param, report.checked
    );
    if report.max_rel_error >= 1e-3 {
        return Err(Error::Consistency(format!(
            "gradient check failed: {:.3e} at {}",
            report.max_rel_error, report.worst_param
        )));
    }
    Ok(())
}

pub fn cmd_leakage_probe(config: &Config) -> Result<()> {
    let (train_set, heldout) = load_splits(config)?;
    let mut tc = config.train_config()?;
    tc.eval_every = 0;
    let schedule = config.schedule()?;
    let (noised, clean) = train::train_leakage_pair(config.model_config()?, &tc, &train_set)?;
    let r = train::leakage_probe(&noised, &clean, &heldout, &schedule, seed::derive(config.seed, Stream::Probe, 0))?;
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
    let text = format!(
        "leakage.schedule = {}\nleakage.copy_rate_by_slot = {}\nleakage.copy_rate_by_slot_noised = {}\n\
         leakage.newtoken_nll_noised = {:.6}\nleakage.newtoken_nll_clean = {:.6}\n\
         leakage.newtoken_nll_noised_clean_inputs = {:.6}\nleakage.newtoken_nll_clean_clean_inputs = {:.6}\n",
        config.schedule,
        list(&r.copy_rate_by_slot),
        list(&r.copy_rate_by_slot_noised),
        r.newtoken_nll_noised,
        r.newtoken_nll_clean,
        r.newtoken_nll_noised_clean_inputs,
        r.newtoken_nll_clean_clean_inputs,
    );
    write_atomic(
        &config.run_dir().join(format!("leakage_{}_{}.txt", config.hash(), config.seed)),
        text.as_bytes(),
    )?;
    print!("{text}");
    Ok(())
}
