//! End-to-end runs: synthesize, train the codec and language model, extract
//! representations and baselines, probe every task, and report.
//!
//! Every stage draws its randomness from a named stream of the root seed, and
//! every artifact lands in the output directory next to a provenance record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{synth::synth_corpus_with, AudioClip, SynthConfig, SynthLabel};
use crate::codec::{reconstruction_mse, train_codec, Codec, CodecConfig};
use crate::data::{clip_id, synth_task_view, Manifest, Split};
use crate::error::{Error, Result};
use crate::extract::{middle_layer, pooled_windows, prepare, window_ranges, ExtractionSpec, LayerStrategy};
use crate::features::cache::{cache_path, config_hash, read_cache, write_atomic, write_cache, CachedFeatures};
use crate::features::{baseline_representation, BaselineConfig, Family};
use crate::lm::{lm_train, perplexity, LanguageModel, LmConfig, LmSequence};
use crate::metrics::{aggregate_report, summary_table, MetricReport, MetricScores};
use crate::probe::{
    grid_search, GridAxes, GridResult, ProbeData, ProbeModel, Schedule, Target, Task, TestSplit, TrainSplit,
    ValidSplit,
};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthStage {
    pub clips: usize,
    pub duration: f64,
    pub clips_per_artist: usize,
    /// Train, valid, test clip ratios for the artist-stratified split.
    pub ratios: Vec<f64>,
    pub render: SynthConfig,
}

impl Default for SynthStage {
    fn default() -> Self {
        Self {
            clips: 240,
            duration: 8.0,
            clips_per_artist: 2,
            ratios: vec![3.0, 1.0, 1.0],
            render: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeStage {
    pub axes: GridAxes,
    pub schedule: Schedule,
}

impl Default for ProbeStage {
    /// A desk-sized slice of the full grid.
    fn default() -> Self {
        Self {
            axes: GridAxes {
                standardize: vec![true],
                model: vec![ProbeModel::Linear, ProbeModel::Mlp512],
                batch_size: vec![64],
                learning_rate: vec![1e-4, 1e-3],
                dropout: vec![0.25],
                l2: vec![0.0, 1e-3],
            },
            schedule: Schedule {
                eval_every: 25,
                patience: 6,
                max_steps: 1000,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthStage,
    pub codec: CodecConfig,
    pub codec_steps: usize,
    pub lm: LmConfig,
    pub lm_steps: usize,
    pub extract: ExtractionSpec,
    pub baselines: BaselineConfig,
    pub probe: ProbeStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthStage::default(),
            codec: CodecConfig::default(),
            codec_steps: 1000,
            lm: LmConfig::default(),
            lm_steps: 600,
            extract: ExtractionSpec::default(),
            baselines: BaselineConfig::default(),
            probe: ProbeStage::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.lm.validate()?;
        if self.lm.vocab != self.codec.vocab {
            return Err(Error::Config(format!(
                "lm.vocab {} differs from codec.vocab {}",
                self.lm.vocab, self.codec.vocab
            )));
        }
        if (self.lm.code_rate - self.codec.code_rate()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "lm.code_rate {} differs from the codec's {}",
                self.lm.code_rate,
                self.codec.code_rate()
            )));
        }
        if self.synth.clips == 0 || !(self.synth.duration > 0.0) {
            return Err(Error::Config("synth needs clips > 0 and duration > 0".into()));
        }
        if self.probe.axes.is_empty() {
            return Err(Error::Config("probe grid is empty".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Named substream seed for a stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, stage)
    }
}

pub const STAGES: [&str; 7] = ["synth", "train-codec", "encode", "train-lm", "extract", "probe", "report"];

/// Clips and labels of the synthetic corpus with one manifest per task.
/// Clip `i` has id [`clip_id`]`(i)`.
pub struct SynthCorpus {
    pub clips: Vec<AudioClip>,
    pub labels: Vec<SynthLabel>,
    pub manifests: BTreeMap<Task, Manifest>,
}

impl SynthCorpus {
    pub fn generate(stage: &SynthStage, seed: u64) -> Result<Self> {
        let (clips, labels): (Vec<_>, Vec<_>) =
            synth_corpus_with(&stage.render, stage.clips, stage.duration, rng::derive_seed(seed, "synth"))
                .into_iter()
                .unzip();
        let split_seed = rng::derive_seed(seed, "split");
        let manifests = Task::ALL
            .into_iter()
            .map(|t| {
                let m = synth_task_view(
                    &labels,
                    t,
                    stage.render.timbre_classes,
                    stage.clips_per_artist,
                    &stage.ratios,
                    split_seed,
                )?;
                Ok((t, m))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            clips,
            labels,
            manifests,
        })
    }

    /// Indices of the clips in `split` (identical across tasks).
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let m = self.manifests.values().next().expect("four manifests");
        m.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Hex SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Features keyed by clip id.
pub type FeatureSet = BTreeMap<String, CachedFeatures>;

/// Reuse cached features when present, otherwise compute and store them.
fn cached<F>(cache: Option<&Path>, id: &str, family: &Family, hash: &str, compute: F) -> Result<CachedFeatures>
where
    F: FnOnce() -> Result<CachedFeatures>,
{
    let Some(root) = cache else {
        return compute();
    };
    let path = cache_path(root, id, family, hash);
    if let Ok(hit) = read_cache(&path) {
        if &hit.family == family {
            return Ok(hit);
        }
    }
    let fresh = compute()?;
    write_cache(&path, &fresh)?;
    Ok(fresh)
}

/// Language-model features of every clip: one vector per model window
/// (all whole windows), holding the layers chosen by `spec.strategy`.
pub fn extract_features(
    clips: &[(String, AudioClip)],
    codec: &Codec,
    lm: &LanguageModel,
    spec: &ExtractionSpec,
    cache: Option<&Path>,
) -> Result<FeatureSet> {
    let layers = spec.strategy.resolve(lm.layers())?;
    let family = Family::Calm(layers.clone());
    let hash = config_hash(&(
        digest(&codec.to_checkpoint()?.to_bytes()),
        digest(&lm.to_checkpoint()?.to_bytes()),
        spec,
    ));
    let out = par::map(clips, |(id, clip)| {
        let f = cached(cache, id, &family, &hash, || {
            let windows = pooled_windows(clip, codec, lm, spec, true)?
                .into_iter()
                .map(|pooled| crate::extract::concat_layers(&pooled, &layers))
                .collect();
            CachedFeatures::new(family.clone(), windows)
        })?;
        Ok((id.clone(), f))
    });
    out.into_iter().collect()
}

/// Baseline features of every clip: one vector per analysis window of
/// `window_seconds` (all whole windows).
pub fn baseline_features(
    clips: &[(String, AudioClip)],
    family: &Family,
    config: &BaselineConfig,
    window_seconds: f64,
    cache: Option<&Path>,
) -> Result<FeatureSet> {
    let hash = config_hash(&(config, window_seconds));
    let out = par::map(clips, |(id, clip)| {
        let f = cached(cache, id, family, &hash, || {
            let w = ((window_seconds * clip.sample_rate() as f64).round() as usize).max(1);
            let windows = window_ranges(clip.len(), w, true)
                .into_iter()
                .map(|r| Ok(baseline_representation(&clip.slice(r)?, family, config, id)?.vector))
                .collect::<Result<Vec<_>>>()?;
            CachedFeatures::new(family.clone(), windows)
        })?;
        Ok((id.clone(), f))
    });
    out.into_iter().collect()
}

/// Probe rows of one split: key clips contribute every window, other tasks
/// their first. Row clip indices are manifest record positions.
pub fn probe_split(manifest: &Manifest, features: &FeatureSet, split: Split) -> Result<ProbeData> {
    let task = manifest.task;
    let mut rows = Vec::new();
    let mut targets: Vec<Target> = Vec::new();
    let mut clips = Vec::new();
    for (i, r) in manifest.records.iter().enumerate().filter(|(_, r)| r.split == split) {
        let f = features
            .get(&r.clip_id)
            .ok_or_else(|| Error::invalid(format!("no features for clip {:?}", r.clip_id)))?;
        let n = if task == Task::Key { f.windows.len() } else { 1 };
        for w in &f.windows[..n] {
            rows.extend(w.iter().map(|&v| v as f64));
            targets.push(r.label.clone());
            clips.push(i);
        }
    }
    if clips.is_empty() {
        return Err(Error::invalid(format!("{split} split of the {task} manifest is empty")));
    }
    let x = ndarray::Array2::from_shape_vec((clips.len(), rows.len() / clips.len()), rows)
        .map_err(|e| Error::invalid(e.to_string()))?;
    ProbeData::new(x, targets, clips, task)
}

pub fn probe_splits(manifest: &Manifest, features: &FeatureSet) -> Result<(TrainSplit, ValidSplit, TestSplit)> {
    Ok((
        TrainSplit(probe_split(manifest, features, Split::Train)?),
        ValidSplit(probe_split(manifest, features, Split::Valid)?),
        TestSplit(probe_split(manifest, features, Split::Test)?),
    ))
}

/// Grid search for one task on one representation; test metrics are
/// reported when the manifest has a test split.
pub fn probe_task(
    manifest: &Manifest,
    features: &FeatureSet,
    stage: &ProbeStage,
    seed: u64,
) -> Result<GridResult> {
    let train = TrainSplit(probe_split(manifest, features, Split::Train)?);
    let valid = ValidSplit(probe_split(manifest, features, Split::Valid)?);
    let test = match manifest.count(Split::Test) {
        0 => None,
        _ => Some(TestSplit(probe_split(manifest, features, Split::Test)?)),
    };
    grid_search(
        &train,
        &valid,
        test.as_ref(),
        manifest.task,
        &stage.axes,
        &stage.schedule,
        seed,
    )
}

/// Test metrics of the best config of each task's grid.
pub fn report_row(representation: &str, grids: &[GridResult]) -> MetricReport {
    let mut scores = MetricScores::default();
    for g in grids {
        if let Some(t) = &g.best().test {
            t.fill(g.task, &mut scores);
        }
    }
    aggregate_report(representation, scores)
}

/// Summary table text followed by per-metric records.
pub fn render_report(rows: &[MetricReport]) -> String {
    let mut out = summary_table(rows);
    out.push('\n');
    for r in rows {
        out.push_str(&r.records());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub codec_recon_mse_init: f64,
    pub codec_recon_mse: f64,
    pub codes_in_use: usize,
    pub lm_valid_ce: f64,
    pub lm_valid_ce_init: f64,
    pub uniform_ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub formats: BTreeMap<String, u32>,
    /// SHA-256 of every artifact, keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub config: PipelineConfig,
}

pub struct PipelineOutput {
    pub report: String,
    pub rows: Vec<MetricReport>,
    pub grids: BTreeMap<(String, Task), GridResult>,
    pub training: TrainingSummary,
    /// Wall-clock seconds per stage, in run order.
    pub timings: Vec<(&'static str, f64)>,
}

struct Artifacts {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Artifacts {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.hashes.insert(rel.to_string(), digest(bytes));
        Ok(())
    }
}

fn timed<T>(timings: &mut Vec<(&'static str, f64)>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    log::info!("stage {stage}");
    let out = f().map_err(|e| e.in_stage(stage))?;
    let secs = t.elapsed().as_secs_f64();
    log::info!("stage {stage} done in {secs:.1}s");
    timings.push((stage, secs));
    Ok(out)
}

/// Run every stage, writing artifacts under `out`. `cache` is the feature
/// cache root, if any.
pub fn run_pipeline(config: &PipelineConfig, out: &Path, cache: Option<&Path>) -> Result<PipelineOutput> {
    config.validate()?;
    let mut timings = Vec::new();
    let mut art = Artifacts {
        root: out.to_path_buf(),
        hashes: BTreeMap::new(),
    };

    let corpus = timed(&mut timings, "synth", || {
        let corpus = SynthCorpus::generate(&config.synth, config.seed)?;
        for (task, m) in &corpus.manifests {
            art.write(&format!("manifests/{task}.jsonl"), m.to_jsonl()?.as_bytes())?;
        }
        Ok(corpus)
    })?;
    let train_idx = corpus.split_indices(Split::Train);
    let valid_idx = corpus.split_indices(Split::Valid);

    let (codec, codec_init, prepared) = timed(&mut timings, "train-codec", || {
        let seed = config.stage_seed("codec");
        let init = Codec::new(config.codec.clone(), seed)?;
        let prepared: Vec<AudioClip> = par::map(&corpus.clips, |c| prepare(c, &init))
            .into_iter()
            .collect::<Result<_>>()?;
        let train: Vec<AudioClip> = train_idx.iter().map(|&i| prepared[i].clone()).collect();
        let (codec, _) = train_codec(&train, &config.codec, config.codec_steps, seed)?;
        art.write("codec.ckpt", &codec.to_checkpoint()?.to_bytes())?;
        Ok((codec, init, prepared))
    })?;

    let sequences = timed(&mut timings, "encode", || {
        let seqs = par::map(&prepared, |c| codec.encode(c).map(LmSequence::from));
        seqs.into_iter().collect::<Result<Vec<_>>>()
    })?;

    let (lm, lm_ce, lm_ce_init) = timed(&mut timings, "train-lm", || {
        let seed = config.stage_seed("lm");
        let train: Vec<LmSequence> = train_idx.iter().map(|&i| sequences[i].clone()).collect();
        let valid: Vec<LmSequence> = valid_idx.iter().map(|&i| sequences[i].clone()).collect();
        let init_ce = perplexity(&LanguageModel::new(config.lm.clone(), seed)?, &valid)?;
        let (lm, _) = lm_train(&train, &config.lm, config.lm_steps, seed)?;
        let ce = perplexity(&lm, &valid)?;
        art.write("lm.ckpt", &lm.to_checkpoint()?.to_bytes())?;
        Ok((lm, ce, init_ce))
    })?;

    let held_out: Vec<AudioClip> = valid_idx.iter().map(|&i| prepared[i].clone()).collect();
    let training = TrainingSummary {
        codec_recon_mse_init: reconstruction_mse(&codec_init, &held_out)?,
        codec_recon_mse: reconstruction_mse(&codec, &held_out)?,
        codes_in_use: codec.codebook.codes_in_use(config.codec.dead_code_threshold),
        lm_valid_ce: lm_ce,
        lm_valid_ce_init: lm_ce_init,
        uniform_ce: (config.lm.vocab as f64).ln(),
    };
    art.write("training.json", serde_json::to_string_pretty(&training)?.as_bytes())?;

    let named: Vec<(String, AudioClip)> = corpus
        .clips
        .iter()
        .enumerate()
        .map(|(i, c)| (clip_id(i), c.clone()))
        .collect();
    let representations: Vec<(String, FeatureSet)> = timed(&mut timings, "extract", || {
        let layer = match &config.extract.strategy {
            LayerStrategy::Middle => format!("calm-L{}", middle_layer(lm.layers())),
            other => format!("calm-{other}"),
        };
        let calm = extract_features(&named, &codec, &lm, &config.extract, cache)?;
        let mut reps = vec![(layer, calm)];
        for family in [Family::Chroma, Family::Mfcc] {
            let f = baseline_features(&named, &family, &config.baselines, config.extract.window_seconds, cache)?;
            reps.push((family.to_string(), f));
        }
        Ok(reps)
    })?;

    let grids = timed(&mut timings, "probe", || {
        let mut grids = BTreeMap::new();
        for (name, features) in &representations {
            for (task, manifest) in &corpus.manifests {
                let seed = rng::derive_seed(config.stage_seed("probe"), &format!("{name}/{task}"));
                let g = probe_task(manifest, features, &config.probe, seed)?;
                art.write(&format!("grids/{name}-{task}.jsonl"), g.table_records()?.as_bytes())?;
                grids.insert((name.clone(), *task), g);
            }
        }
        Ok(grids)
    })?;

    let (report, rows) = timed(&mut timings, "report", || {
        let rows: Vec<MetricReport> = representations
            .iter()
            .map(|(name, _)| {
                let gs: Vec<GridResult> = Task::ALL.iter().map(|&t| grids[&(name.clone(), t)].clone()).collect();
                report_row(name, &gs)
            })
            .collect();
        let report = render_report(&rows);
        art.write("report.txt", report.as_bytes())?;
        Ok((report, rows))
    })?;

    let provenance = provenance(config, art.hashes);
    write_atomic(&out.join("provenance.json"), serde_json::to_string_pretty(&provenance)?.as_bytes())?;
    Ok(PipelineOutput {
        report,
        rows,
        grids,
        training,
        timings,
    })
}

pub fn provenance(config: &PipelineConfig, artifacts: BTreeMap<String, String>) -> Provenance {
    let seeds = ["synth", "split", "codec", "lm", "probe"]
        .iter()
        .map(|s| (s.to_string(), config.stage_seed(s)))
        .chain([("root".to_string(), config.seed)])
        .collect();
    let formats = [
        ("manifest", crate::data::MANIFEST_VERSION),
        ("features", crate::features::cache::VERSION),
        ("checkpoint", crate::checkpoint::VERSION),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), *v))
    .collect();
    Provenance {
        tool: "jukeprobe".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(config),
        seeds,
        formats,
        artifacts,
        config: config.clone(),
    }
}

/// Read the audio of every record (or of one split), keyed by clip id.
pub fn load_clips(manifest_path: &Path, manifest: &Manifest, split: Option<Split>) -> Result<Vec<(String, AudioClip)>> {
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    let out = par::map(&records, |r| {
        let path = crate::data::resolve_audio(manifest_path, r);
        let clip = crate::audio::wav::read_wav(&path).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        })?;
        Ok((r.clip_id.clone(), clip))
    });
    out.into_iter().collect()
}

/// Summary row from grid tables (JSON lines as written by
/// [`GridResult::table_records`]), one table per task.
pub fn report_from_tables(representation: &str, tables: &[&str]) -> Result<MetricReport> {
    let mut scores = MetricScores::default();
    for table in tables {
        let mut best = None;
        for line in table.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("best").and_then(|b| b.as_bool()) == Some(true) {
                best = Some(v);
                break;
            }
        }
        let best = best.ok_or_else(|| Error::format("grid table", "no row marked best"))?;
        let task: Task = serde_json::from_value(best["task"].clone())?;
        if let Some(test) = best.get("test").filter(|t| !t.is_null()) {
            let t: crate::probe::TaskScores = serde_json::from_value(test.clone())?;
            t.fill(task, &mut scores);
        }
    }
    Ok(aggregate_report(representation, scores))
}

/// All-layer splits for layer sweeps; features hold `layers` blocks.
pub fn layered_splits(manifest: &Manifest, features: &FeatureSet) -> Result<crate::extract::LayeredSplits> {
    let first = features
        .values()
        .next()
        .ok_or_else(|| Error::invalid("no features"))?;
    let layers = match &first.family {
        Family::Calm(l) if l.iter().copied().eq(1..=l.len()) => l.len(),
        other => {
            return Err(Error::invalid(format!(
                "layer sweeps need features of layers 1..=L, got {other}"
            )))
        }
    };
    Ok(crate::extract::LayeredSplits {
        task: manifest.task,
        train: probe_split(manifest, features, Split::Train)?,
        valid: probe_split(manifest, features, Split::Valid)?,
        d: first.dims / layers,
        layers,
    })
}
