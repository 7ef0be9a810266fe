use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use jukeprobe::audio::wav::{write_wav, WavEncoding};
use jukeprobe::codec::{train_codec, Codec};
use jukeprobe::data::{artist_stratified_split, load_manifest, write_manifest, Manifest, Split};
use jukeprobe::extract::{greedy_layer_select, layer_sweep, prepare, ExtractionSpec, LayerStrategy};
use jukeprobe::features::cache::{read_cache, sanitize, write_atomic, write_cache, CachedFeatures};
use jukeprobe::features::Family;
use jukeprobe::lm::{lm_train, perplexity, LanguageModel, LmSequence};
use jukeprobe::metrics::MetricReport;
use jukeprobe::pipeline::{
    baseline_features, digest, extract_features, layered_splits, load_clips, probe_task, render_report,
    report_from_tables, run_pipeline, FeatureSet, PipelineConfig, ProbeStage, SynthCorpus,
};
use jukeprobe::probe::{GridAxes, Schedule, Task};
use jukeprobe::{par, rng};

const CACHE_ENV: &str = "JUKEPROBE_CACHE";

#[derive(Parser, Debug)]
#[command(name = "jukeprobe", version, about = "Codified audio language modeling and MIR probing")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads (0 = all cores). Never changes numeric output.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Hierarchical TOML config; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the labeled synthetic corpus: WAV files plus one manifest per task.
    Synth(SynthArgs),
    /// Train the VQ codec on a manifest's train split.
    TrainCodec(TrainCodecArgs),
    /// Train the code language model on codified train-split audio.
    TrainLm(TrainLmArgs),
    /// Pool language-model activations into per-clip feature files.
    Extract(ExtractArgs),
    /// Compute pooled chroma or MFCC baseline features.
    Features(FeaturesArgs),
    /// Assign artist-stratified splits to a manifest.
    Split(SplitArgs),
    /// Grid-search probes for one task and write the grid table.
    Probe(ProbeArgs),
    /// Probe every layer separately and report normalized scores.
    SweepLayers(SweepArgs),
    /// Summarize grid tables into the results table.
    Report(ReportArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    clips: Option<usize>,
    /// Seconds per clip.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    clips_per_artist: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainCodecArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainLmArgs {
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// middle | subsample:N | greedy:TASK:B | layers:1,3,5
    #[arg(long)]
    strategy: Option<LayerStrategy>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    /// chroma | mfcc
    #[arg(long)]
    family: Family,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Clip-count ratios for train, valid and optionally test.
    #[arg(long, value_delimiter = ',', default_value = "4,1")]
    ratios: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Must match the manifest's task.
    #[arg(long)]
    task: Task,
    /// Grid table, one JSON record per config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Features extracted with every layer (`--strategy layers:1,2,...,L`).
    #[arg(long)]
    features: PathBuf,
    /// One manifest per task to sweep.
    #[arg(long, num_args = 1.., required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Grid tables named `<representation>-<task>.jsonl`.
    #[arg(long, num_args = 1.., required = true)]
    grid: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    config_hash: String,
    config: &'a PipelineConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct Ctx {
    config: PipelineConfig,
    cache: Option<PathBuf>,
    command: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Ctx {
    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), digest(&bytes));
        Ok(bytes)
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(path.display().to_string(), digest(bytes));
        Ok(())
    }

    fn manifest(&mut self, path: &Path) -> Result<Manifest> {
        self.input(path)?;
        Ok(load_manifest(path)?)
    }

    fn seed(&self, stage: &str) -> u64 {
        self.config.stage_seed(stage)
    }

    /// Provenance record in `dir` (or next to the output file).
    fn finish(self, at: &Path) -> Result<()> {
        let dir = if at.extension().is_some() {
            at.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            at.to_path_buf()
        };
        let name = match at.file_stem().filter(|_| at.extension().is_some()) {
            Some(stem) => format!("{}.provenance.json", stem.to_string_lossy()),
            None => "provenance.json".to_string(),
        };
        let record = Provenance {
            tool: "jukeprobe",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: std::env::args().skip(1).collect(),
            seed: self.config.seed,
            config_hash: jukeprobe::features::cache::config_hash(&self.config),
            config: &self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        write_atomic(&dir.join(name), serde_json::to_string_pretty(&record)?.as_bytes())?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn features_dir_write(ctx: &mut Ctx, dir: &Path, features: &FeatureSet) -> Result<()> {
    for (id, f) in features {
        let path = dir.join(format!("{}.jmpr", sanitize(id)));
        write_cache(&path, f)?;
        ctx.outputs.insert(path.display().to_string(), digest(&f.to_bytes()));
    }
    Ok(())
}

fn features_dir_read(dir: &Path, manifest: &Manifest) -> Result<FeatureSet> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.jmpr", sanitize(&r.clip_id)));
            let f = read_cache(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok((r.clip_id.clone(), f))
        })
        .collect()
}

fn grid_stage(config: &PipelineConfig, explicit: bool) -> ProbeStage {
    if explicit {
        config.probe.clone()
    } else {
        ProbeStage {
            axes: GridAxes::default(),
            schedule: Schedule::default(),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let command = match &cli.command {
        Command::Synth(_) => "synth",
        Command::TrainCodec(_) => "train-codec",
        Command::TrainLm(_) => "train-lm",
        Command::Extract(_) => "extract",
        Command::Features(_) => "features",
        Command::Split(_) => "split",
        Command::Probe(_) => "probe",
        Command::SweepLayers(_) => "sweep-layers",
        Command::Report(_) => "report",
        Command::Pipeline(_) => "pipeline",
    };
    let mut ctx = Ctx {
        config,
        cache,
        command,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    let has_config = cli.config.is_some();
    match cli.command {
        Command::Synth(a) => {
            let s = &mut ctx.config.synth;
            s.clips = a.clips.unwrap_or(s.clips);
            s.duration = a.duration.unwrap_or(s.duration);
            s.clips_per_artist = a.clips_per_artist.unwrap_or(s.clips_per_artist);
            let corpus = SynthCorpus::generate(&ctx.config.synth, ctx.config.seed)?;
            for (i, clip) in corpus.clips.iter().enumerate() {
                let path = a.out.join(format!("audio/{}.wav", jukeprobe::data::clip_id(i)));
                std::fs::create_dir_all(path.parent().expect("has parent"))?;
                write_wav(&path, clip, WavEncoding::Float32)?;
                ctx.outputs.insert(path.display().to_string(), digest(&std::fs::read(&path)?));
            }
            for (task, m) in &corpus.manifests {
                ctx.output(&a.out.join(format!("{task}.jsonl")), m.to_jsonl()?.as_bytes())?;
            }
            log::info!("wrote {} clips to {}", corpus.clips.len(), a.out.display());
            ctx.finish(&a.out)
        }
        Command::TrainCodec(a) => {
            let manifest = ctx.manifest(&a.corpus)?;
            let steps = a.steps.unwrap_or(ctx.config.codec_steps);
            let seed = ctx.seed("codec");
            let shell = Codec::new(ctx.config.codec.clone(), seed)?;
            let train: Vec<_> = load_clips(&a.corpus, &manifest, Some(Split::Train))?
                .iter()
                .map(|(_, c)| prepare(c, &shell))
                .collect::<jukeprobe::Result<_>>()?;
            let (codec, trace) = train_codec(&train, &ctx.config.codec, steps, seed)?;
            if let Some(last) = trace.steps.last() {
                log::info!("codec: final recon {:.5}, {} codes in use", last.recon, last.codes_in_use);
            }
            ctx.output(&a.out, &codec.to_checkpoint()?.to_bytes())?;
            ctx.finish(&a.out)
        }
        Command::TrainLm(a) => {
            let codec = Codec::from_checkpoint(&jukeprobe::checkpoint::Checkpoint::from_bytes(&ctx.input(&a.codec)?)?)?;
            let manifest = ctx.manifest(&a.corpus)?;
            let encode = |split| -> Result<Vec<LmSequence>> {
                let clips = load_clips(&a.corpus, &manifest, Some(split))?;
                let seqs = par::map(&clips, |(_, c)| codec.encode(&prepare(c, &codec)?).map(LmSequence::from));
                Ok(seqs.into_iter().collect::<jukeprobe::Result<_>>()?)
            };
            let train = encode(Split::Train)?;
            let mut lm_config = ctx.config.lm.clone();
            lm_config.vocab = codec.config.vocab;
            lm_config.code_rate = codec.config.code_rate();
            let steps = a.steps.unwrap_or(ctx.config.lm_steps);
            let (lm, _) = lm_train(&train, &lm_config, steps, ctx.seed("lm"))?;
            if manifest.count(Split::Valid) > 0 {
                let ce = perplexity(&lm, &encode(Split::Valid)?)?;
                log::info!("lm: validation cross-entropy {ce:.4} nats (uniform {:.4})", (lm_config.vocab as f64).ln());
            }
            ctx.output(&a.out, &lm.to_checkpoint()?.to_bytes())?;
            ctx.finish(&a.out)
        }
        Command::Extract(a) => {
            let codec = Codec::from_checkpoint(&jukeprobe::checkpoint::Checkpoint::from_bytes(&ctx.input(&a.codec)?)?)?;
            let lm = LanguageModel::from_checkpoint(&jukeprobe::checkpoint::Checkpoint::from_bytes(&ctx.input(&a.lm)?)?)?;
            let manifest = ctx.manifest(&a.manifest)?;
            let clips = load_clips(&a.manifest, &manifest, None)?;
            let mut spec = ctx.config.extract.clone();
            if let Some(s) = a.strategy {
                spec.strategy = s;
            }
            let features = match spec.strategy.clone() {
                LayerStrategy::Greedy { task, budget } => {
                    if manifest.task != task {
                        bail!("greedy selection for {task} needs a {task} manifest, got {}", manifest.task);
                    }
                    let all = ExtractionSpec {
                        strategy: LayerStrategy::Layers((1..=lm.layers()).collect()),
                        ..spec.clone()
                    };
                    let full = extract_features(&clips, &codec, &lm, &all, ctx.cache.as_deref())?;
                    let data = layered_splits(&manifest, &full)?;
                    let sweep = jukeprobe::extract::SweepConfig::default();
                    let picked = greedy_layer_select(&data, budget, &sweep, ctx.seed("greedy"))?;
                    log::info!("greedy layers {:?} (validation {:?})", picked.layers, picked.scores);
                    select_blocks(&full, data.d, &picked.layers)?
                }
                _ => extract_features(&clips, &codec, &lm, &spec, ctx.cache.as_deref())?,
            };
            features_dir_write(&mut ctx, &a.out, &features)?;
            ctx.finish(&a.out)
        }
        Command::Features(a) => {
            if matches!(a.family, Family::Calm(_)) {
                bail!("`features` computes baselines (chroma, mfcc); use `extract` for language-model layers");
            }
            let manifest = ctx.manifest(&a.manifest)?;
            let clips = load_clips(&a.manifest, &manifest, None)?;
            let f = baseline_features(
                &clips,
                &a.family,
                &ctx.config.baselines,
                ctx.config.extract.window_seconds,
                ctx.cache.as_deref(),
            )?;
            features_dir_write(&mut ctx, &a.out, &f)?;
            ctx.finish(&a.out)
        }
        Command::Split(a) => {
            let mut manifest = ctx.manifest(&a.manifest)?;
            artist_stratified_split(&mut manifest.records, &a.ratios, ctx.seed("split"))?;
            for s in Split::ALL {
                log::info!("{s}: {} clips", manifest.count(s));
            }
            write_manifest(&a.out, &manifest)?;
            ctx.outputs.insert(a.out.display().to_string(), digest(&std::fs::read(&a.out)?));
            ctx.finish(&a.out)
        }
        Command::Probe(a) => {
            let manifest = ctx.manifest(&a.manifest)?;
            if manifest.task != a.task {
                bail!("--task {} does not match the manifest's task {}", a.task, manifest.task);
            }
            let features = features_dir_read(&a.features, &manifest)?;
            let stage = grid_stage(&ctx.config, has_config);
            let seed = rng::derive_seed(ctx.seed("probe"), a.task.name());
            let grid = probe_task(&manifest, &features, &stage, seed)?;
            let best = grid.best();
            log::info!(
                "{}: best config #{} val {:.3} test {:?}",
                a.task,
                grid.best,
                best.val_score,
                best.test.as_ref().map(|t| &t.metrics)
            );
            ctx.output(&a.out, grid.table_records()?.as_bytes())?;
            ctx.finish(&a.out)
        }
        Command::SweepLayers(a) => {
            let mut tasks = Vec::new();
            for m in &a.manifest {
                let manifest = ctx.manifest(m)?;
                let features = features_dir_read(&a.features, &manifest)?;
                tasks.push(layered_splits(&manifest, &features)?);
            }
            let sweep = jukeprobe::extract::SweepConfig::default();
            let report = layer_sweep(&tasks, &sweep, ctx.seed("sweep"))?;
            let table = report.table();
            print!("{table}");
            ctx.output(&a.out, table.as_bytes())?;
            ctx.finish(&a.out)
        }
        Command::Report(a) => {
            let mut by_rep: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for path in &a.grid {
                let text = String::from_utf8(ctx.input(path)?).context("grid table is not UTF-8")?;
                by_rep.entry(representation_of(path)?).or_default().push(text);
            }
            let rows: Vec<MetricReport> = by_rep
                .iter()
                .map(|(rep, tables)| {
                    let refs: Vec<&str> = tables.iter().map(String::as_str).collect();
                    report_from_tables(rep, &refs)
                })
                .collect::<jukeprobe::Result<_>>()?;
            let report = render_report(&rows);
            print!("{report}");
            if let Some(out) = &a.out {
                ctx.output(out, report.as_bytes())?;
                ctx.finish(out)?;
            }
            Ok(())
        }
        Command::Pipeline(a) => {
            let out = run_pipeline(&ctx.config, &a.out, ctx.cache.as_deref())?;
            for (stage, secs) in &out.timings {
                log::info!("{stage:>12}: {secs:8.1}s");
            }
            print!("{}", out.report);
            Ok(())
        }
    }
}

/// `<representation>-<task>.jsonl` → representation.
fn representation_of(path: &Path) -> Result<String> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for task in Task::ALL {
        if let Some(rep) = stem.strip_suffix(&format!("-{task}")) {
            return Ok(rep.to_string());
        }
    }
    Ok(stem)
}

/// Keep the blocks of `layers` (1-based, width `d`) from all-layer features.
fn select_blocks(full: &FeatureSet, d: usize, layers: &[usize]) -> Result<FeatureSet> {
    full.iter()
        .map(|(id, f)| {
            let windows = f
                .windows
                .iter()
                .map(|w| {
                    layers
                        .iter()
                        .flat_map(|&l| w[(l - 1) * d..l * d].iter().map(|&v| v as f64))
                        .collect()
                })
                .collect();
            Ok((id.clone(), CachedFeatures::new(Family::Calm(layers.to_vec()), windows)?))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let workers = cli.workers;
    match par::with_workers(workers, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
