use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use slidedistill::config::Config;
use slidedistill::distill::{teacher_from_checkpoint, CheckpointBlob, Trainer};
use slidedistill::harness::{
    attention_mil, emit_report, extract_features, fraction_sweep, labeled_patches, parse_table, probe_store,
    smoke_config, smoke_corpus_spec, BagDataset, FeatureStore, FewShotModel, MetricRecord, ProbeKind,
};
use slidedistill::metrics::{evaluate_set, load_pairs, Aggregation, SegRecord};
use slidedistill::model::init_pair;
use slidedistill::pyramid::{generate_synthetic_pyramid, ClassTexture, Corpus, SyntheticSpec};
use slidedistill::Error;

#[derive(Parser)]
#[command(name = "slidedistill", version, about = "Multi-view self-distillation for slide pyramids")]
struct Cli {
    /// TOML config; defaults apply to missing sections and fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, in-order execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a procedural labeled pyramid corpus.
    SynthData(SynthArgs),
    /// Self-distillation pretraining.
    Pretrain(PretrainArgs),
    /// Embeds every patch of a corpus level into a feature store.
    Extract(ExtractArgs),
    /// Linear or attention-MIL probe on a feature store.
    Probe(ProbeArgs),
    #[command(subcommand)]
    Adapt(AdaptCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Table and plots from metric records.
    Report(ReportArgs),
    /// Prints the effective config as TOML.
    Config(ConfigArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Desk-scale smoke corpus (64 slides, 1024 px, 2 classes).
    #[arg(long)]
    smoke: bool,
    #[arg(long)]
    slides: Option<usize>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    tile: Option<u32>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Start from the desk-scale smoke settings instead of the defaults.
    #[arg(long)]
    smoke: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Corpus manifest; falls back to `data.manifest` of the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long, required_unless_present = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Use freshly initialized weights instead of a checkpoint.
    #[arg(long)]
    random_init: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    level: Option<u32>,
    #[arg(long)]
    patch: Option<u32>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeType {
    Linear,
    Mil,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(value_enum)]
    kind: ProbeType,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Training-data fractions to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Series name written into the records.
    #[arg(long, default_value = "probe")]
    series: String,
    /// Record file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AdaptCommand {
    /// Builds the support caches and the low-rank adaptation.
    Fewshot(FewshotArgs),
    /// Scores a labeled corpus with a saved cache.
    Eval(AdaptEvalArgs),
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    shots: usize,
    #[arg(long)]
    out: PathBuf,
    /// Pretraining checkpoint; random initialization when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptEvalArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// DICE, AJI, DQ, SQ and PQ over paired instance maps.
    Seg(SegArgs),
}

#[derive(Args)]
struct SegArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Pool counts over images instead of averaging per image.
    #[arg(long)]
    pooled: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Line-delimited JSON records or a CSV table.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(p), _) => Config::load(p)?,
        (None, Command::Config(ConfigArgs { smoke: true })) => smoke_config(),
        (None, _) => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.probe.seed = s;
        cfg.adapter.seed = s;
    }
    Ok(cfg)
}

fn record_sink(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(std::io::stdout()),
    })
}

fn synth_data(args: &SynthArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec = if args.smoke { smoke_corpus_spec() } else { SyntheticSpec::default() };
    if let Some(n) = args.slides {
        spec.num_slides = n;
    }
    if let Some(s) = args.size {
        spec.level0_size = s;
    }
    if let Some(t) = args.tile {
        spec.tile_size = t;
    }
    if let Some(c) = args.classes {
        spec.num_classes = c;
        let period = spec.texture_params[0].period_px;
        spec.texture_params = slidedistill::pyramid::default_textures(c)
            .into_iter()
            .map(|t| ClassTexture { period_px: period, ..t })
            .collect();
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let manifest = generate_synthetic_pyramid(&spec, &args.out)?;
    println!("{}", json!({"slides": manifest.slides.len(), "out": args.out}));
    Ok(())
}

fn pretrain(cli: &Cli, args: &PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(m) = &args.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    let manifest = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::invalid("no corpus: pass --manifest or set data.manifest"))?;
    let corpus = Corpus::load(&manifest, Some(&levels_for(&cfg)))?;
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(&cfg, &CheckpointBlob::load(p)?)?,
        None => Trainer::new(&cfg)?,
    };
    fs::create_dir_all(&args.out)?;
    cfg.save(&args.out.join("config.toml"))?;
    let log_path = args.out.join("metrics.jsonl");
    let log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)?;
    let mut log = BufWriter::new(log);
    let until = args.steps.unwrap_or(u64::MAX);
    let outcome = trainer.fit(&corpus, until, cli.deterministic, |r| {
        writeln!(log, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&log_path, e))
    });
    log.flush()?;
    // A checkpoint is written even after divergence, holding the last finite state.
    trainer.checkpoint()?.save(&args.out.join("checkpoint.bin"))?;
    outcome?;
    Ok(())
}

fn levels_for(cfg: &Config) -> Vec<u32> {
    let mut levels = vec![cfg.data.level];
    if cfg.views.use_multiscale {
        levels.push(cfg.data.level + cfg.data.coarse_level_offset);
    }
    levels
}

fn extract(cli: &Cli, args: &ExtractArgs) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let params = match &args.checkpoint {
        Some(p) if !args.random_init => teacher_from_checkpoint(&cfg.model, &CheckpointBlob::load(p)?)?,
        _ => init_pair(&cfg.model, cfg.train.seed)?.teacher,
    };
    let level = args.level.unwrap_or(cfg.data.level);
    let size = args.patch.unwrap_or(cfg.data.patch_size);
    let corpus = Corpus::load(&args.manifest, Some(&[level]))?;
    let mut store = if args.out.exists() {
        FeatureStore::load(&args.out)?
    } else {
        FeatureStore::new(cfg.model.embed_dim)
    };
    let workers = if cli.deterministic { 1 } else { args.workers };
    let summary = extract_features(&cfg.model, &params, &corpus, level, size, workers, &mut store)?;
    store.save(&args.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn probe(cli: &Cli, args: &ProbeArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(cli)?.probe;
    cfg.kind = match args.kind {
        ProbeType::Linear => ProbeKind::Linear,
        ProbeType::Mil => ProbeKind::Mil,
    };
    let store = FeatureStore::load(&args.features)?;
    let corpus = Corpus::load(&args.manifest, Some(&[]))?;
    let mut sink = record_sink(args.out.as_deref())?;
    match args.kind {
        ProbeType::Linear if !args.fractions.is_empty() => {
            for r in fraction_sweep(&store, &corpus, &args.series, &args.fractions, args.test_fraction, &cfg)? {
                writeln!(sink, "{}", serde_json::to_string(&r)?)?;
            }
        }
        ProbeType::Linear => {
            let m = probe_store(&store, &corpus, args.test_fraction, &cfg)?;
            write_metrics(&mut sink, &args.series, 1.0, &m)?;
        }
        ProbeType::Mil => {
            let labels = corpus.labels.clone().ok_or_else(|| Error::invalid("corpus has no slide labels"))?;
            let named: Vec<(String, usize)> = corpus.slides.iter().map(|s| s.id.clone()).zip(labels).collect();
            let bags = BagDataset::from_store(&store, &named)?;
            let (train, test) = slidedistill::harness::stratified_split(&bags.labels, args.test_fraction, cfg.seed)?;
            let m = attention_mil(&store, &bags.subset(&train), &bags.subset(&test), corpus.num_classes(), &cfg)?.1;
            write_metrics(&mut sink, &args.series, 1.0, &m)?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn write_metrics(sink: &mut dyn Write, series: &str, x: f64, m: &slidedistill::harness::ProbeMetrics) -> anyhow::Result<()> {
    for (metric, value) in [("accuracy", m.accuracy), ("auc", m.auc)] {
        let r = MetricRecord {
            series: series.into(),
            x,
            metric: metric.into(),
            value,
        };
        writeln!(sink, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

fn adapt(cli: &Cli, cmd: &AdaptCommand) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    match cmd {
        AdaptCommand::Fewshot(args) => {
            let params = match &args.checkpoint {
                Some(p) => teacher_from_checkpoint(&cfg.model, &CheckpointBlob::load(p)?)?,
                None => init_pair(&cfg.model, cfg.train.seed)?.teacher,
            };
            let corpus = Corpus::load(&args.train_manifest, Some(&[cfg.data.level]))?;
            let support = labeled_patches(
                &corpus,
                cfg.data.level,
                cfg.data.patch_size,
                cfg.model.image_size,
                Some(args.shots),
                cfg.adapter.seed,
            )?;
            let model = FewShotModel::fit(&cfg.model, &params, &support, &cfg.adapter)?;
            model.save(&args.out, &support.sources)?;
            println!(
                "{}",
                json!({"classes": model.meta.class_count, "shots": model.meta.shots_per_class, "out": args.out})
            );
        }
        AdaptCommand::Eval(args) => {
            let model = FewShotModel::load(&args.cache)?;
            let corpus = Corpus::load(&args.test_manifest, Some(&[cfg.data.level]))?;
            let test = labeled_patches(
                &corpus,
                cfg.data.level,
                cfg.data.patch_size,
                model.meta.model.image_size,
                None,
                0,
            )?;
            let m = model.evaluate(&test)?;
            let mut sink = record_sink(args.out.as_deref())?;
            write_metrics(&mut sink, "fewshot", model.meta.shots_per_class as f64, &m)?;
            sink.flush()?;
        }
    }
    Ok(())
}

fn eval_seg(args: &SegArgs) -> anyhow::Result<()> {
    let pairs = load_pairs(&args.gt, &args.pred)?;
    let mode = if args.pooled { Aggregation::Pooled } else { Aggregation::PerImage };
    let (records, agg) = evaluate_set(&pairs, mode)?;
    let mut sink = record_sink(Some(&args.out))?;
    writeln!(sink, "{}", SegRecord::CSV_HEADER)?;
    for r in records.iter().chain(std::iter::once(&agg)) {
        writeln!(sink, "{}", r.csv_row())?;
    }
    sink.flush()?;
    Ok(())
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.records).with_context(|| format!("reading {}", args.records.display()))?;
    let records: Vec<MetricRecord> = if text.starts_with(slidedistill::harness::REPORT_HEADER) {
        parse_table(&text)?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<_, _>>()?
    };
    let files = emit_report(&records, &args.out)?;
    println!("{}", serde_json::to_string(&files)?);
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a, cli.seed),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::Extract(a) => extract(cli, a),
        Command::Probe(a) => probe(cli, a),
        Command::Adapt(c) => adapt(cli, c),
        Command::Eval(EvalCommand::Seg(a)) => eval_seg(a),
        Command::Report(a) => report(a),
        Command::Config(_) => {
            print!("{}", load_config(cli)?.to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
