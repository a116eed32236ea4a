//! `unet-aec`: corpus generation, training, search, streaming cancellation,
//! evaluation and benchmarking from the command line.

mod settings;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use aec_core::harness::{
    bench, cancel_files, compare_precisions, EngineCanceller, EngineConfig, EngineKind,
};
use aec_core::metrics::evaluate_corpus;
use aec_core::synth::{gen_corpus, read_manifest, CorpusConfig, Scenario, ScenarioMix};
use aec_core::train::{
    random_search, train, LossConfig, OptimizerKind, SearchConfig, SearchSpace, TrainConfig,
    TrainSample,
};
use aec_core::unet::{
    load_weights, quantize_fp16, save_weights, NetTopology, NetWeights, Network, Precision,
    ResidualConfig,
};
use aec_core::STRIDE_FRAMES;

use settings::Settings;

/// A problem with how the program was invoked rather than with the work.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "unet-aec",
    version,
    about = "Acoustic echo cancellation toolkit"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` file; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Inference or storage precision (fp32 | fp16).
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a U-Net on a corpus and save its weights.
    Train(TrainArgs),
    /// Random search over optimizer and topology settings.
    Search(SearchArgs),
    /// Cancel echo in one far/mic WAV pair.
    Cancel(CancelArgs),
    /// Score an engine on a corpus.
    Eval(EvalArgs),
    /// Time the per-stride stages.
    Bench(BenchArgs),
    /// Print a weight file's topology and parameter count.
    InspectWeights { file: PathBuf },
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    num: usize,
    /// Seconds per sample.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Directory of 16 kHz speech WAVs; synthetic speech otherwise.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Restrict to one scenario.
    #[arg(long)]
    scenario: Option<Scenario>,
}

#[derive(Args, Debug, Default)]
struct TopologyArgs {
    #[arg(long)]
    encoders: Option<usize>,
    #[arg(long)]
    base_filters: Option<usize>,
    #[arg(long)]
    residual: Option<ResidualConfig>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Random frames cut from each corpus entry.
    #[arg(long)]
    frames_per_sample: Option<usize>,
    /// Keep only the lowest bins (faster, for experiments).
    #[arg(long)]
    freq_bins: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    shape: TopologyArgs,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    /// Write `step,loss` rows here.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    budget: usize,
    /// Share of corpus entries held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[command(flatten)]
    shape: TopologyArgs,
    /// Ranked trial table (CSV); printed when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EngineArgs {
    #[arg(long)]
    engine: Option<EngineKind>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CancelArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    far: PathBuf,
    #[arg(long)]
    mic: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Print the stage breakdown.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for `summary.csv` and `samples.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Time fp32 against fp16 on the same U-Net weights.
    #[arg(long)]
    compare: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(p) = cli.precision {
        s.engine.precision = p;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(&s, a),
        Command::Train(a) => cmd_train(s, a),
        Command::Search(a) => cmd_search(s, a),
        Command::Cancel(a) => {
            let cfg = engine_config(&s, &a.engine);
            if let Some(b) = cancel_files(&cfg, &a.far, &a.mic, &a.out, a.timing)? {
                print!("{}", b.to_table());
            }
            Ok(())
        }
        Command::Eval(a) => cmd_eval(&s, a),
        Command::Bench(a) => cmd_bench(&s, a),
        Command::InspectWeights { file } => {
            print!("{}", describe_weights(&load_weights(&file)?));
            Ok(())
        }
    }
}

fn engine_config(s: &Settings, a: &EngineArgs) -> EngineConfig {
    let mut cfg = s.engine.clone();
    if let Some(e) = a.engine {
        cfg.engine = e;
    }
    if let Some(w) = &a.weights {
        cfg.weights = Some(w.clone());
    }
    cfg
}

fn describe_weights(w: &NetWeights) -> String {
    let t = w.topology();
    let mut out = String::new();
    let _ = writeln!(out, "encoders: {}", t.num_encoders);
    let _ = writeln!(out, "decoders: {}", t.num_decoders);
    let _ = writeln!(out, "base_filters: {}", t.base_filters);
    let _ = writeln!(out, "residual: {}", t.residual);
    let _ = writeln!(out, "depth: {}", t.depth);
    let _ = writeln!(out, "precision: {}", w.precision);
    let _ = writeln!(out, "params: {}", t.param_count());
    let _ = writeln!(out, "stored_bytes: {}", w.stored_bytes());
    out
}

fn cmd_gen(s: &Settings, a: GenArgs) -> anyhow::Result<()> {
    let cfg = CorpusConfig {
        num_samples: a.num,
        seed: s.seed,
        duration_s: a.duration,
        mix: a.scenario.map(ScenarioMix::only).unwrap_or_default(),
        source_dir: a.source,
        ..CorpusConfig::default()
    };
    let rows = gen_corpus(&cfg, &a.out)?;
    println!("wrote {} samples to {}", rows.len(), a.out.display());
    Ok(())
}

fn apply_shape(s: &mut Settings, a: &TopologyArgs) {
    let t = &mut s.train;
    let pairs = [
        (&mut t.encoders, a.encoders),
        (&mut t.base_filters, a.base_filters),
        (&mut t.depth, a.depth),
        (&mut t.epochs, a.epochs),
        (&mut t.batch_size, a.batch_size),
        (&mut t.frames_per_sample, a.frames_per_sample),
        (&mut t.freq_bins, a.freq_bins),
    ];
    for (dst, v) in pairs {
        if let Some(v) = v {
            *dst = v;
        }
    }
    if let Some(r) = a.residual {
        t.residual = r;
    }
}

/// Random training frames from every corpus entry. The frame offsets of entry
/// `i` depend only on the seed and `i`.
fn load_frames(s: &Settings, corpus: &Path) -> anyhow::Result<Vec<(usize, Vec<TrainSample<f64>>)>> {
    let rows = read_manifest(corpus)?;
    if rows.is_empty() {
        bail!("corpus {} has no entries", corpus.display());
    }
    rows.iter()
        .map(|row| {
            let e = row.load(corpus)?;
            let frames = TrainSample::random_frames(
                e.far_end.samples(),
                e.mic.samples(),
                e.near_end.samples(),
                s.train.frames_per_sample,
                s.train.freq_bins,
                s.seed
                    .wrapping_mul(0x9e37_79b9)
                    .wrapping_add(row.index as u64),
            )
            .with_context(|| format!("corpus entry {}", row.index))?;
            Ok((row.index, frames))
        })
        .collect()
}

fn cmd_train(mut s: Settings, a: TrainArgs) -> anyhow::Result<()> {
    apply_shape(&mut s, &a.shape);
    if let Some(k) = a.optimizer {
        s.optimizer.kind = k;
    }
    if let Some(lr) = a.lr {
        s.optimizer.learning_rate = lr;
    }
    let t = &s.train;
    let topology = NetTopology::new(t.encoders, t.base_filters, t.residual, t.depth)?;
    let data: Vec<TrainSample<f32>> = load_frames(&s, &a.corpus)?
        .into_iter()
        .flat_map(|(_, v)| v)
        .map(|x| x.cast())
        .collect();
    info!(
        "{} training frames, {} parameters",
        data.len(),
        topology.param_count()
    );
    let cfg = TrainConfig {
        topology,
        optimizer: s.optimizer,
        loss: LossConfig::new(STRIDE_FRAMES, t.freq_bins),
        epochs: t.epochs,
        batch_size: t.batch_size,
        seed: s.seed,
    };
    let outcome = train(&data, &cfg)?;
    if let Some(path) = &a.loss_csv {
        let mut csv = String::from("step,loss\n");
        for (i, l) in outcome.step_losses.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l:e}");
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut weights = NetWeights::new(outcome.network);
    if s.engine.precision == Precision::Fp16 {
        let (q, report) = quantize_fp16(&weights);
        info!("fp16 quantization: {report:?}");
        weights = q;
    }
    save_weights(&a.out, &weights)?;
    if let (Some(first), Some(last)) = (outcome.epoch_losses.first(), outcome.epoch_losses.last()) {
        println!("epoch loss {first:.6} -> {last:.6}");
    }
    println!("saved {} ({})", a.out.display(), weights.precision);
    Ok(())
}

fn cmd_search(mut s: Settings, a: SearchArgs) -> anyhow::Result<()> {
    apply_shape(&mut s, &a.shape);
    if !(0.0 < a.val_fraction && a.val_fraction < 1.0) {
        return Err(UsageError(format!("val-fraction {} outside (0, 1)", a.val_fraction)).into());
    }
    let entries = load_frames(&s, &a.corpus)?;
    if entries.len() < 2 {
        bail!("search needs at least two corpus entries");
    }
    let n_val =
        ((entries.len() as f64 * a.val_fraction).ceil() as usize).clamp(1, entries.len() - 1);
    let split = entries.len() - n_val;
    let flatten = |e: &[(usize, Vec<TrainSample<f64>>)]| -> Vec<TrainSample<f32>> {
        e.iter()
            .flat_map(|(_, v)| v.iter().map(|x| x.cast()))
            .collect()
    };
    let (train_set, val_set) = (flatten(&entries[..split]), flatten(&entries[split..]));
    let cfg = SearchConfig {
        budget: a.budget,
        epochs: s.train.epochs,
        batch_size: s.train.batch_size,
        depth: s.train.depth,
        loss: LossConfig::new(STRIDE_FRAMES, s.train.freq_bins),
        seed: s.seed,
    };
    let report = random_search(&SearchSpace::default(), &cfg, &train_set, &val_set)?;
    let table = report.to_csv();
    match &a.report {
        Some(p) => std::fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{table}"),
    }
    if let Some(best) = report.best() {
        let c = &best.config;
        println!(
            "best: {} lr {:e}, {}-{} {} F0={} (val {:.6})",
            c.optimizer,
            c.learning_rate,
            c.encoders,
            c.encoders - 1,
            c.residual,
            c.base_filters,
            best.val_loss
        );
    }
    Ok(())
}

fn cmd_eval(s: &Settings, a: EvalArgs) -> anyhow::Result<()> {
    let cfg = engine_config(s, &a.engine);
    let canceller = EngineCanceller::new(cfg)?;
    let report = evaluate_corpus(&canceller, &a.corpus)?;
    print!("{}", report.to_table());
    print!("{}", report.summary_text());
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, body) in [
            ("summary.csv", report.to_table()),
            ("samples.csv", report.samples_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    Ok(())
}

/// Weights for timing runs: the configured file, or a randomly initialized
/// full-size network when none is given.
fn bench_weights(cfg: &EngineConfig, seed: u64) -> anyhow::Result<NetWeights> {
    Ok(match &cfg.weights {
        Some(p) => load_weights(p)?,
        None => {
            info!("no weights given; timing a randomly initialized network");
            NetWeights::new(Network::init(NetTopology::paper(), seed)?)
        }
    })
}

fn cmd_bench(s: &Settings, a: BenchArgs) -> anyhow::Result<()> {
    let cfg = engine_config(s, &a.engine);
    if a.compare {
        let w = bench_weights(&cfg, s.seed)?;
        print!("{}", compare_precisions(&w, a.duration, a.reps)?.to_text());
        return Ok(());
    }
    let report = match cfg.engine {
        EngineKind::Unet => bench(
            &cfg,
            Some(&bench_weights(&cfg, s.seed)?),
            a.duration,
            a.reps,
        )?,
        _ => bench(&cfg, None, a.duration, a.reps)?,
    };
    print!("{}", report.to_text());
    Ok(())
}
