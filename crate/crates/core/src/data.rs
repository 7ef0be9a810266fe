//! Dataset manifests, the artist-stratified splitter, and task views of the
//! synthetic corpus.
//!
//! A manifest is JSON lines: a header object
//! `{"format":"jukeprobe-manifest","version":1,"task":"key"}` followed by one
//! record per clip.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::SynthLabel;
use crate::error::{Error, Result};
use crate::features::cache::write_atomic;
use crate::probe::{Target, Task};
use crate::rng;

pub const MANIFEST_FORMAT: &str = "jukeprobe-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: String,
    /// Audio file, relative to the manifest's directory unless absolute.
    pub audio: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artist_id: Option<String>,
    pub label: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub task: Task,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(task: Task, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { task, records };
        for (i, r) in m.records.iter().enumerate() {
            m.check(r).map_err(|message| Error::Manifest {
                path: PathBuf::from("<memory>"),
                line: i + 2,
                message,
            })?;
        }
        let mut seen = HashSet::new();
        if let Some(r) = m.records.iter().find(|r| !seen.insert(r.clip_id.as_str())) {
            return Err(Error::invalid(format!("duplicate clip_id {:?}", r.clip_id)));
        }
        Ok(m)
    }

    fn check(&self, r: &ManifestRecord) -> std::result::Result<(), String> {
        if r.clip_id.is_empty() {
            return Err("empty clip_id".into());
        }
        if !r.label.matches(self.task) {
            return Err(format!("label {:?} does not fit the {} schema", r.label, self.task));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            task: self.task,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parse manifest text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header_text) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: Header = serde_json::from_str(header_text).map_err(|e| err(hl + 1, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(err(hl + 1, format!("unknown format {:?}", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(err(hl + 1, format!("unsupported version {}", header.version)));
        }
        let mut m = Manifest {
            task: header.task,
            records: Vec::new(),
        };
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let r: ManifestRecord = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            m.check(&r).map_err(|e| err(i + 1, e))?;
            if !seen.insert(r.clip_id.clone()) {
                return Err(err(i + 1, format!("duplicate clip_id {:?}", r.clip_id)));
            }
            m.records.push(r);
        }
        Ok(m)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::parse(&std::fs::read_to_string(path)?, path)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_atomic(path, manifest.to_jsonl()?.as_bytes())
}

/// Audio path of a record, resolved against the manifest location.
pub fn resolve_audio(manifest_path: &Path, record: &ManifestRecord) -> PathBuf {
    if record.audio.is_absolute() {
        record.audio.clone()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&record.audio)
    }
}

/// Assign splits so that no artist spans two splits.
///
/// Artists are visited largest first (equal sizes in a seeded order) and
/// each goes to the split furthest below its target clip count; ties go to
/// the earlier split. `ratios` maps to train, valid, test in order.
pub fn artist_stratified_split(records: &mut [ManifestRecord], ratios: &[f64], seed: u64) -> Result<()> {
    if ratios.is_empty() || ratios.len() > 3 || ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::invalid("split ratios must be 1 to 3 positive numbers"));
    }
    let mut artists: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records.iter() {
        let a = r
            .artist_id
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("record {:?} has no artist_id", r.clip_id)))?;
        *artists.entry(a).or_default() += 1;
    }
    let mut order: Vec<(&str, usize)> = artists.into_iter().collect();
    order.shuffle(&mut rng::stream(seed, "artist-split"));
    order.sort_by(|a, b| b.1.cmp(&a.1));

    let total = records.len() as f64;
    let sum: f64 = ratios.iter().sum();
    let targets: Vec<f64> = ratios.iter().map(|r| r / sum * total).collect();
    if let Some(&(a, n)) = order.first() {
        let max_share = targets.iter().copied().fold(0.0, f64::max);
        if n as f64 > max_share {
            log::warn!("artist {a:?} owns {n} of {total} clips, more than any split's share; split is best effort");
        }
    }
    let mut filled = vec![0.0; ratios.len()];
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (artist, n) in order {
        let mut best = 0;
        for s in 1..ratios.len() {
            if targets[s] - filled[s] > targets[best] - filled[best] {
                best = s;
            }
        }
        filled[best] += n as f64;
        assignment.insert(artist.to_string(), Split::ALL[best]);
    }
    for r in records.iter_mut() {
        r.split = assignment[r.artist_id.as_deref().expect("checked above")];
    }
    Ok(())
}

/// Label of one synthetic clip under `task`.
pub fn synth_target(label: &SynthLabel, task: Task, timbre_classes: usize) -> Target {
    match task {
        Task::Tagging => Target::Tags(label.tag_set.clone()),
        Task::Genre => Target::Class(label.timbre_class),
        Task::Key => Target::Key(label.key),
        Task::Emotion => Target::Emotion {
            arousal: label.arousal(),
            valence: label.valence(timbre_classes),
        },
    }
}

/// Manifest of the synthetic corpus for one task. Clip `i` is
/// `audio/clip-{i:04}.wav` by artist `i / clips_per_artist`; splits are
/// artist-stratified at `ratios`.
pub fn synth_task_view(
    labels: &[SynthLabel],
    task: Task,
    timbre_classes: usize,
    clips_per_artist: usize,
    ratios: &[f64],
    seed: u64,
) -> Result<Manifest> {
    let per = clips_per_artist.max(1);
    let mut records: Vec<ManifestRecord> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| ManifestRecord {
            clip_id: clip_id(i),
            audio: PathBuf::from(format!("audio/{}.wav", clip_id(i))),
            split: Split::Train,
            artist_id: Some(format!("artist-{:03}", i / per)),
            label: synth_target(l, task, timbre_classes),
        })
        .collect();
    artist_stratified_split(&mut records, ratios, seed)?;
    Manifest::new(task, records)
}

pub fn clip_id(i: usize) -> String {
    format!("clip-{i:04}")
}
