//! The `grle` command line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_examples, write_examples, Corpus, TrainExample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, parse_metrics, EvalOptions, EvalReport};
use crate::model::Model;
use crate::trainer::{Strategy, Trainer};
use crate::verify::{check_loss, gradcache_equivalence, EquivalenceOptions, GradCheckOptions, LossComponent};

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_FAILURE: i32 = 1;

pub const RESOLVED_CONFIG: &str = "config.resolved.cfg";

const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADCACHE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "grle", version, about = "Train and evaluate small decoder-only text embedding models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Seeds model init, adapters, data generation and shuffling.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Any config key, e.g. `--set train.learning_rate=1e-3`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Embed texts from a JSON-lines file of {"id", "text"} records.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus directory and print the main score.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "ndcg@10,map")]
        metrics: String,
        /// Report path; defaults to `<checkpoint>/eval-<corpus>.json`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Directory for cached document embeddings.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Finite-difference checks of every loss and gradient-cache equivalence.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Where to write the resolved config and the check summary.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

#[derive(Serialize)]
struct EmbeddingRecord<'a> {
    id: &'a str,
    embedding: Vec<f32>,
}

/// Failures sorted into the two non-zero exit codes.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit status.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let result = match cli.command {
        Command::Train {
            config,
            strategy,
            seed,
            output,
            overrides,
        } => train(&config, strategy, seed, output, &overrides),
        Command::Embed {
            checkpoint,
            input,
            output,
        } => embed(&checkpoint, &input, &output).map_err(Failure::Runtime),
        Command::Eval {
            checkpoint,
            corpus,
            metrics,
            output,
            cache_dir,
        } => eval(&checkpoint, &corpus, &metrics, output, cache_dir),
        Command::Gradcheck { config, output } => gradcheck(&config, output),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprint!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprint!(": {s}");
                src = s.source();
            }
            eprintln!();
            EXIT_FAILURE
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("GRLE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("GRLE_THREADS must be a positive integer, got `{v}`"))?;
    // A pool built earlier in the same process (tests) is left alone.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn resolve_config(
    path: &Path,
    strategy: Option<Strategy>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    overrides: &[String],
) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects SECTION.KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = strategy {
        cfg.train.strategy = s;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.lora_seed = s;
        cfg.train.seed = s;
        cfg.data.synthetic.seed = s;
    }
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(
    path: &Path,
    strategy: Option<Strategy>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    overrides: &[String],
) -> std::result::Result<i32, Failure> {
    let cfg = resolve_config(path, strategy, seed, output, overrides)?;
    let out = cfg.output_dir.clone();
    create_dir(&out).map_err(|e| Failure::Usage(format!("output.dir is not writable: {e}")))?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.to_kv())?;

    let (examples, synthetic_eval): (Vec<TrainExample>, Option<Corpus>) = match &cfg.data.train {
        Some(p) => (load_examples(p)?, None),
        None => {
            let task = cfg.data.synthetic.options().generate()?;
            let data_dir = out.join("data");
            create_dir(&data_dir)?;
            write_examples(&data_dir.join("train.jsonl"), &task.train)?;
            task.eval.save(&data_dir.join("eval"))?;
            (task.train, Some(task.eval))
        }
    };

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.model.seed)?;
    if let Some(lora) = &cfg.lora {
        model.apply_lora(lora.clone(), cfg.lora_seed)?;
    }
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let last = trainer.fit(&examples, &out)?;
    println!("checkpoint {}", last.display());

    let corpus = match cfg.eval_corpus()? {
        Some(c) => Some(c),
        None => synthetic_eval,
    };
    if let Some(corpus) = corpus {
        let metrics = parse_metrics(&cfg.eval.metrics).map_err(|e| Failure::Usage(e.to_string()))?;
        let report = evaluate(trainer.model(), &corpus, &metrics, &EvalOptions::default())?;
        write_report(&out.join("eval.json"), &report)?;
        println!("{} {}", report.main_metric, report.main_score);
    }
    Ok(0)
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(report)? + "\n"))
}

fn embed(checkpoint: &Path, input: &Path, output: &Path) -> Result<i32> {
    let model = Model::<f32>::load(checkpoint)?;
    let file = File::open(input).map_err(|e| Error::io(format!("opening {}", input.display()), e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", input.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TextRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: input.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(r);
    }
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let embeddings = model.encode_texts(&texts, 32)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = File::create(output).map_err(|e| Error::io(format!("creating {}", output.display()), e))?;
    let mut w = BufWriter::new(file);
    for (r, e) in records.iter().zip(embeddings) {
        let line = serde_json::to_string(&EmbeddingRecord {
            id: &r.id,
            embedding: e,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", output.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", output.display()), e))?;
    Ok(0)
}

#[derive(Serialize)]
struct EvalArgs<'a> {
    checkpoint: &'a Path,
    corpus: &'a Path,
    metrics: &'a str,
    cache_dir: Option<&'a Path>,
}

fn eval(
    checkpoint: &Path,
    corpus: &Path,
    metrics: &str,
    output: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
) -> std::result::Result<i32, Failure> {
    let parsed = parse_metrics(metrics).map_err(|e| Failure::Usage(format!("--metrics: {e}")))?;
    if !corpus.is_dir() {
        return Err(Failure::Usage(format!("--corpus: {} is not a directory", corpus.display())));
    }
    let model = Model::<f32>::load(checkpoint)?;
    let data = Corpus::load(corpus)?;
    let opts = EvalOptions {
        cache_dir: cache_dir.clone(),
        checkpoint_id: Some(checkpoint.display().to_string()),
    };
    let report = evaluate(&model, &data, &parsed, &opts)?;
    let path = output.unwrap_or_else(|| checkpoint.join(format!("eval-{}.json", data.name)));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_report(&path, &report)?;
    let args = EvalArgs {
        checkpoint,
        corpus,
        metrics,
        cache_dir: cache_dir.as_deref(),
    };
    let mut args_path = path.clone().into_os_string();
    args_path.push(".args.json");
    write_file(Path::new(&args_path), &(serde_json::to_string_pretty(&args).map_err(Error::from)? + "\n"))?;
    println!("{}", report.main_score);
    Ok(0)
}

fn gradcheck(path: &Path, output: Option<PathBuf>) -> std::result::Result<i32, Failure> {
    let cfg = resolve_config(path, None, None, output, &[])?;
    let out = cfg.output_dir.clone();
    create_dir(&out).map_err(|e| Failure::Usage(format!("output.dir is not writable: {e}")))?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.to_kv())?;

    let mut summary = String::new();
    let mut ok = true;
    let fd = GradCheckOptions {
        weights: cfg.train.weights.clone(),
        ..Default::default()
    };
    for c in LossComponent::ALL {
        let r = check_loss(c, &fd)?;
        let pass = r.max_rel_error() < GRADIENT_TOLERANCE;
        ok &= pass;
        let line = format!(
            "{} gradient {c}: max relative error {:.3e} over {} elements",
            if pass { "PASS" } else { "FAIL" },
            r.max_rel_error(),
            r.checked()
        );
        println!("{line}");
        summary += &line;
        summary.push('\n');
    }
    let eq = EquivalenceOptions {
        weights: cfg.train.weights.clone(),
        ..Default::default()
    };
    for r in gradcache_equivalence(&eq)? {
        let pass = r.max_abs_diff < GRADCACHE_TOLERANCE && r.losses_identical();
        ok &= pass;
        let line = format!(
            "{} gradcache {} micro={}: max abs diff {:.3e}, losses {}",
            if pass { "PASS" } else { "FAIL" },
            r.strategy,
            r.micro_batch_size,
            r.max_abs_diff,
            if r.losses_identical() { "identical" } else { "differ" }
        );
        println!("{line}");
        summary += &line;
        summary.push('\n');
    }
    write_file(&out.join("gradcheck.txt"), &summary)?;
    Ok(if ok { 0 } else { EXIT_FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run_cli(["grle", "serve"]), EXIT_USAGE);
        assert_eq!(run_cli(["grle"]), EXIT_USAGE);
        assert_eq!(run_cli(["grle", "--help"]), 0);
    }

    #[test]
    fn config_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "[train]\nbatch_size = many\n").unwrap();
        let c = cfg.to_str().unwrap();
        assert_eq!(run_cli(["grle", "train", "--config", c]), EXIT_USAGE);
        fs::write(&cfg, "[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(run_cli(["grle", "train", "--config", c, "--set", "model.n_heads=5"]), EXIT_USAGE);
        assert_eq!(run_cli(["grle", "train", "--config", "/nope/missing.cfg"]), EXIT_USAGE);
    }

    #[test]
    fn missing_checkpoint_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        assert_eq!(run_cli(["grle", "eval", "--checkpoint", d, "--corpus", d]), EXIT_FAILURE);
        assert_eq!(run_cli(["grle", "eval", "--checkpoint", d, "--corpus", d, "--metrics", "recall@5"]), EXIT_USAGE);
    }
}
