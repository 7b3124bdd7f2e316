//! Experiment orchestration: subcommands, run directories, manifests, and
//! reproducibility plumbing. Every run is fully determined by its effective
//! config (including the seed); the config, its hash, and the code version
//! are written into the run directory before anything else happens.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{Checkpoint, SourceState};
use crate::config::{config_hash, ExperimentConfig, SourceKind};
use crate::data::{self, DatasetSpec, EvalStream, Role};
use crate::error::{Error, Result};
use crate::eval::{self, EvalProtocol, SweepCache};
use crate::lstm::{LstmSource, SourceBuffer};
use crate::markov;
use crate::model::Transformer;
use crate::rng::StreamRng;
use crate::sources::{DataSource, TransformerSource, TransformerSourceConfig};
use crate::theory;
use crate::train::{self, MetricsWriter, RunHooks, TrainMode, Trainer};

#[derive(Parser)]
#[command(
    name = "uplab",
    version,
    about = "Pre-train small models on structured random data and evaluate them against in-context Markov baselines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on a generated source and evaluate zero-shot.
    Pretrain(RunArgs),
    /// Tune a pretrained checkpoint (or a reinitialized baseline) on a corpus.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint against the tuned Markov baseline.
    Eval(EvalArgs),
    /// Exhaustive (order, smoothing) sweep of the in-context Markov model.
    MarkovSweep(SweepArgs),
    /// Dump a synthetic evaluation stream to a file.
    Gen(GenArgs),
    /// Exact verification of the mixture/domination theory on toy classes.
    TheoryCheck(TheoryArgs),
    /// Run source-ablation variants under one model/training config.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Flat config overrides, e.g. --set train.base_lr=1e-4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override run.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty run directory.
    #[arg(long)]
    force: bool,
    /// Record real wallclock seconds in metrics.csv (breaks byte-for-byte
    /// reproducibility of the file).
    #[arg(long)]
    timing: bool,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Byte corpus to tune on.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional truncation of the corpus.
    #[arg(long)]
    max_bytes: Option<usize>,
    /// Pretrained checkpoint to start from (required unless --baseline).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reinitialize parameters with the pretraining scheme instead.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Built-in datasets to evaluate (default: all eight).
    #[arg(long = "dataset")]
    datasets: Vec<String>,
    /// Byte corpora to evaluate.
    #[arg(long = "corpus")]
    corpora: Vec<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    slices: usize,
    #[arg(long, default_value_t = 512)]
    ctx: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for report.csv and the sweep cache (print-only when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Built-in dataset name.
    #[arg(long, conflicts_with = "corpus")]
    dataset: Option<String>,
    /// Byte corpus path.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    ctx: usize,
    #[arg(long, default_value_t = 2000)]
    slices: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the full grid as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = data::MIN_STREAM_LEN)]
    min_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Additional toy-class spec files.
    #[arg(long = "class-file")]
    class_files: Vec<PathBuf>,
    /// Iteration steps for the conditional-class checks.
    #[arg(long, default_value_t = 3)]
    steps: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated variants (default: all).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

/// Entry point: parse, run, map errors to exit codes.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.cmd {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::MarkovSweep(args) => cmd_sweep(args),
        Command::Gen(args) => cmd_gen(args),
        Command::TheoryCheck(args) => cmd_theory(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::Parse(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Environment variable naming the default output root (the one piece of
/// environment the config system consults). Explicit config or --out wins.
pub const OUT_ROOT_ENV: &str = "UPLAB_OUT_ROOT";

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => String::new(),
    };
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("run.out_dir=\"{}\"", out.display()));
    }
    let mut cfg = ExperimentConfig::parse_with_overrides(&text, &overrides)?;
    if args.out.is_none() && cfg.run.out_dir == crate::config::RunBlock::default().out_dir {
        if let Some(root) = std::env::var_os(OUT_ROOT_ENV) {
            cfg.run.out_dir = std::path::PathBuf::from(root);
        }
    }
    Ok(cfg)
}

/// Create the run directory, refusing to overwrite without --force, and
/// write the effective config plus the manifest.
fn prepare_run_dir(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "run directory {} is not empty; pass --force to reuse it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_text = cfg.to_toml()?;
    std::fs::write(dir.join("config.toml"), &config_text)
        .map_err(|e| Error::io(dir.join("config.toml"), e))?;
    let manifest = format!(
        "name = \"{}\"\nseed = {}\nconfig_hash = \"{}\"\ncode_version = \"{}\"\n",
        cfg.run.name,
        cfg.run.seed,
        config_hash(&config_text),
        env!("CARGO_PKG_VERSION"),
    );
    std::fs::write(dir.join("manifest.toml"), manifest)
        .map_err(|e| Error::io(dir.join("manifest.toml"), e))?;
    Ok(())
}

/// Rebuild the configured source from a checkpointed state.
fn restore_source(
    cfg: &ExperimentConfig,
    state: &SourceState,
    root: &StreamRng,
) -> Result<Box<dyn DataSource>> {
    match (cfg.source.kind, state) {
        (SourceKind::Lstm, SourceState::LstmBuffer { round, capacity, context_len, entries, depths }) => {
            let buffer =
                SourceBuffer::from_state(*capacity, *context_len, entries.clone(), depths.clone())?;
            // Run the constructor to reproduce any nobuf capacity
            // adjustment, then swap in the checkpointed buffer state.
            let sample = LstmSource::new(cfg.source.sample.clone(), root, cfg.train.microbatch)?
                .cfg;
            Ok(Box::new(LstmSource::restore(sample, root, buffer, *round)))
        }
        (SourceKind::Transformer, SourceState::LstmBuffer { round, capacity, context_len, entries, depths }) => {
            let buffer =
                SourceBuffer::from_state(*capacity, *context_len, entries.clone(), depths.clone())?;
            Ok(Box::new(TransformerSource::restore(
                TransformerSourceConfig {
                    width: cfg.source.transformer_width,
                    depth: cfg.source.transformer_depth,
                    sample: cfg.source.sample.clone(),
                },
                root,
                buffer,
                *round,
            )))
        }
        (_, SourceState::Round(round)) => {
            let mut source = cfg.build_source(root)?;
            source.restore_round(*round)?;
            Ok(source)
        }
        (_, SourceState::None) => cfg.build_source(root),
        (kind, state) => Err(Error::Checkpoint(format!(
            "checkpoint source state {state:?} does not match configured source {kind:?}"
        ))),
    }
}

/// Train, write metrics/checkpoints, and finish with a full comparison
/// report against the Markov baseline.
fn run_training(
    cfg: &ExperimentConfig,
    dir: &Path,
    mut trainer: Trainer,
    source: &mut dyn DataSource,
    extra_streams: Vec<(EvalStream, Role)>,
    timing: bool,
) -> Result<Checkpoint> {
    let root = StreamRng::new(cfg.run.seed);
    let mut streams = cfg.build_eval_streams(&root)?;
    streams.extend(extra_streams);
    let proto = cfg.eval.protocol();

    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = MetricsWriter::new(Some(&metrics_path), timing)?;
    let mut hooks = RunHooks {
        eval_streams: &streams,
        proto,
        metrics: &mut metrics,
        checkpoint_dir: Some(&ckpt_dir),
    };
    let result = train::run(&mut trainer, source, &mut hooks);
    if result.is_err() {
        // Preserve the last-good parameters next to the interval checkpoints.
        let _ = trainer
            .to_checkpoint(source.state())
            .save(&ckpt_dir.join("ckpt_abort.bin"));
    }
    let ck = result?;

    // Final comparison report with the tuned Markov baseline.
    let cache_path = dir.join("sweep_cache.csv");
    let mut cache = if cache_path.exists() {
        let text =
            std::fs::read_to_string(&cache_path).map_err(|e| Error::io(&cache_path, e))?;
        SweepCache::from_csv(&text)?
    } else {
        SweepCache::default()
    };
    let eval_base = root.stream("final-report");
    let rows = eval::compare(&trainer.model, &streams, &mut cache, &proto, &eval_base, ck.instances_seen)?;
    std::fs::write(&cache_path, cache.to_csv()).map_err(|e| Error::io(&cache_path, e))?;
    std::fs::write(dir.join("report.csv"), eval::report_csv(&rows))
        .map_err(|e| Error::io(dir.join("report.csv"), e))?;
    let table = eval::report_table(&rows);
    std::fs::write(dir.join("report.txt"), &table)
        .map_err(|e| Error::io(dir.join("report.txt"), e))?;
    println!("{table}");
    Ok(ck)
}

fn cmd_pretrain(args: RunArgs) -> Result<i32> {
    let cfg = load_config(&args)?;
    let dir = cfg.run.out_dir.join(&cfg.run.name);
    prepare_run_dir(&cfg, &dir, args.force)?;
    let root = StreamRng::new(cfg.run.seed);
    let (trainer, mut source) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let trainer = Trainer::from_checkpoint(&ck, cfg.train.clone())?;
            let source = restore_source(&cfg, &ck.source, trainer.root_rng())?;
            (trainer, source)
        }
        None => {
            let model = cfg.init_model()?;
            let trainer = Trainer::new(model, cfg.train.clone(), cfg.run.seed)?;
            let source = cfg.build_source(&root)?;
            (trainer, source)
        }
    };
    run_training(&cfg, &dir, trainer, source.as_mut(), Vec::new(), args.timing)?;
    Ok(0)
}

fn cmd_finetune(args: FinetuneArgs) -> Result<i32> {
    let mut cfg = load_config(&args.run)?;
    if args.baseline {
        cfg.train.mode = TrainMode::Baseline;
    } else if cfg.train.mode == TrainMode::Pretrain {
        cfg.train.mode = TrainMode::Finetune;
    }
    let dir = cfg.run.out_dir.join(&cfg.run.name);
    prepare_run_dir(&cfg, &dir, args.run.force)?;

    let corpus = data::load_corpus(&args.corpus, args.max_bytes)?;
    let root = StreamRng::new(cfg.run.seed);
    let trainer = match cfg.train.mode {
        TrainMode::Baseline => {
            // Reinitialize with the pretraining scheme, sized like the
            // checkpoint when one is given.
            let model = match &args.checkpoint {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    Transformer::init(ck.config.clone(), &StreamRng::new(cfg.run.seed))?
                }
                None => cfg.init_model()?,
            };
            Trainer::new(model, cfg.train.clone(), cfg.run.seed)?
        }
        _ => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                Error::InvalidArgument("finetune requires --checkpoint (or --baseline)".into())
            })?;
            let ck = Checkpoint::load(path)?;
            // Finetuning restarts the schedule counters; only parameters carry over.
            Trainer::new(ck.to_model(), cfg.train.clone(), cfg.run.seed)?
        }
    };
    let mut source = cfg.build_corpus_source(&corpus, &root)?;
    let extra = vec![(corpus, Role::Test)];
    run_training(&cfg, &dir, trainer, &mut source, extra, args.run.timing)?;
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.to_model();
    let root = StreamRng::new(args.seed);
    let mut streams: Vec<(EvalStream, Role)> = Vec::new();
    let names: Vec<String> = if args.datasets.is_empty() && args.corpora.is_empty() {
        DatasetSpec::builtin_names().iter().map(|s| s.to_string()).collect()
    } else {
        args.datasets.clone()
    };
    for name in &names {
        let spec = DatasetSpec::builtin(name)?;
        let mut rng = root.stream("dataset").stream(name);
        let stream = data::build_stream(&spec, &mut rng, data::MIN_STREAM_LEN)?;
        streams.push((stream, spec.role));
    }
    for path in &args.corpora {
        streams.push((data::load_corpus(path, None)?, Role::Test));
    }
    let proto = EvalProtocol {
        slice_count: args.slices,
        ctx: args.ctx,
        batch: 32,
    };
    let cache_path = args.out.as_ref().map(|d| d.join("sweep_cache.csv"));
    let mut cache = match &cache_path {
        Some(p) if p.exists() => {
            SweepCache::from_csv(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
        }
        _ => SweepCache::default(),
    };
    let rows = eval::compare(&model, &streams, &mut cache, &proto, &root.stream("report"), ck.instances_seen)?;
    print!("{}", eval::report_table(&rows));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        std::fs::write(out.join("report.csv"), eval::report_csv(&rows))
            .map_err(|e| Error::io(out.join("report.csv"), e))?;
        if let Some(p) = &cache_path {
            std::fs::write(p, cache.to_csv()).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let stream = match (&args.dataset, &args.corpus) {
        (Some(name), None) => {
            let spec = DatasetSpec::builtin(name)?;
            let mut rng = StreamRng::new(args.seed).stream("dataset").stream(name);
            data::build_stream(&spec, &mut rng, data::MIN_STREAM_LEN)?
        }
        (None, Some(path)) => data::load_corpus(path, None)?,
        _ => {
            return Err(Error::InvalidArgument(
                "markov-sweep needs exactly one of --dataset or --corpus".into(),
            ))
        }
    };
    let mut rng = StreamRng::new(args.seed).stream("markov-sweep").stream(&stream.name);
    let result = markov::sweep(&stream.tokens, args.ctx, args.slices, &mut rng)?;
    let mut csv = String::from("dataset,ctx,order,lambda,bits\n");
    for (k, lambda, bits) in &result.grid {
        csv.push_str(&format!("{},{},{k},{lambda:e},{bits:.6}\n", stream.name, args.ctx));
    }
    print!("{csv}");
    println!(
        "best: order {} lambda {:e} -> {:.6} bits/char",
        result.best.order, result.best.lambda, result.best_bits
    );
    if let Some(out) = &args.out {
        std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(0)
}

fn cmd_gen(args: GenArgs) -> Result<i32> {
    let spec = DatasetSpec::builtin(&args.dataset)?;
    let mut rng = StreamRng::new(args.seed).stream("dataset").stream(&args.dataset);
    let stream = data::build_stream(&spec, &mut rng, args.min_len)?;
    std::fs::write(&args.out, &stream.tokens).map_err(|e| Error::io(&args.out, e))?;
    println!(
        "wrote {} tokens of {} to {}",
        stream.tokens.len(),
        stream.name,
        args.out.display()
    );
    Ok(0)
}

fn cmd_theory(args: TheoryArgs) -> Result<i32> {
    let mut classes: Vec<(String, theory::ToyClass)> = theory::shipped_classes()
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect();
    let mut cond_classes: Vec<(String, theory::CondClass)> = theory::shipped_cond_classes()
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect();
    for path in &args.class_files {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "class".into());
        match theory::parse_class_file(&text)? {
            theory::ParsedClass::Measure(c) => classes.push((name, c)),
            theory::ParsedClass::Conditional(c) => cond_classes.push((name, c)),
        }
    }
    let lines = theory::run_all_checks(&classes, &cond_classes, args.steps)?;
    let mut failed = 0usize;
    for line in &lines {
        println!(
            "{} {:<55} {}",
            if line.pass { "pass" } else { "FAIL" },
            line.name,
            line.detail
        );
        if !line.pass {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", lines.len(), failed);
    Ok(if failed == 0 { 0 } else { 1 })
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    const ALL: [&str; 9] = [
        "lstm",
        "lstm-nobuf",
        "lstm-noit",
        "pointwise",
        "ndfa",
        "transformer",
        "utm-10",
        "utm-50",
        "utm-250",
    ];
    let variants: Vec<String> = if args.variants.is_empty() {
        ALL.iter().map(|s| s.to_string()).collect()
    } else {
        args.variants.clone()
    };
    let base_cfg = load_config(&args.run)?;
    let base_dir = base_cfg.run.out_dir.join(&base_cfg.run.name);
    prepare_run_dir(&base_cfg, &base_dir, args.run.force)?;

    let mut summary = String::from("variant,dataset,split,bits_per_char\n");
    for variant in &variants {
        let mut cfg = base_cfg.clone();
        apply_variant(&mut cfg, variant)?;
        let dir = base_dir.join(variant);
        prepare_run_dir(&cfg, &dir, args.run.force)?;
        let model = cfg.init_model()?;
        let trainer = Trainer::new(model, cfg.train.clone(), cfg.run.seed)?;
        let root = StreamRng::new(cfg.run.seed);
        let mut source = cfg.build_source(&root)?;
        println!("== variant {variant}");
        run_training(&cfg, &dir, trainer, source.as_mut(), Vec::new(), args.run.timing)?;
        let report = std::fs::read_to_string(dir.join("report.csv"))
            .map_err(|e| Error::io(dir.join("report.csv"), e))?;
        for line in report.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() >= 4 {
                summary.push_str(&format!(
                    "{variant},{},{},{}\n",
                    fields[0], fields[1], fields[2]
                ));
            }
        }
    }
    std::fs::write(base_dir.join("ablate_summary.csv"), &summary)
        .map_err(|e| Error::io(base_dir.join("ablate_summary.csv"), e))?;
    print!("{summary}");
    Ok(0)
}

fn apply_variant(cfg: &mut ExperimentConfig, variant: &str) -> Result<()> {
    cfg.source.sample.nobuf = false;
    cfg.source.sample.noit = false;
    match variant {
        "lstm" => cfg.source.kind = SourceKind::Lstm,
        "lstm-nobuf" => {
            cfg.source.kind = SourceKind::Lstm;
            cfg.source.sample.nobuf = true;
        }
        "lstm-noit" => {
            cfg.source.kind = SourceKind::Lstm;
            cfg.source.sample.noit = true;
        }
        "pointwise" => cfg.source.kind = SourceKind::Pointwise,
        "ndfa" => cfg.source.kind = SourceKind::Ndfa,
        "transformer" => cfg.source.kind = SourceKind::Transformer,
        "utm-10" | "utm-50" | "utm-250" => {
            cfg.source.kind = SourceKind::Utm;
            cfg.source.utm_scale = variant
                .rsplit('-')
                .next()
                .and_then(|s| s.parse().ok())
                .expect("utm variant suffix");
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown ablation variant '{other}' (expected lstm, lstm-nobuf, lstm-noit, pointwise, ndfa, transformer, utm-10, utm-50, or utm-250)"
            )))
        }
    }
    Ok(())
}
