use std::collections::BTreeSet;

use jukeprobe::data::{load_manifest, Split};
use jukeprobe::pipeline::{report_from_tables, run_pipeline, PipelineConfig, ProbeStage};
use jukeprobe::probe::{GridAxes, ProbeModel, Schedule, Task};

fn tiny() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.seed = 5;
    c.synth.clips = 30;
    c.synth.duration = 2.0;
    c.codec_steps = 5;
    c.lm_steps = 5;
    c.lm.context = 64;
    c.probe = ProbeStage {
        axes: GridAxes {
            standardize: vec![true],
            model: vec![ProbeModel::Linear],
            batch_size: vec![64],
            learning_rate: vec![1e-3],
            dropout: vec![0.25],
            l2: vec![0.0],
        },
        schedule: Schedule {
            eval_every: 5,
            patience: 1,
            max_steps: 10,
        },
    };
    c
}

#[test]
fn config_round_trips_through_toml() {
    let c = tiny();
    let text = c.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
}

#[test]
fn mismatched_vocab_is_rejected() {
    let mut c = tiny();
    c.lm.vocab += 1;
    assert!(c.validate().is_err());
}

#[test]
fn tiny_run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let out = run_pipeline(&tiny(), dir.path(), Some(cache.path())).unwrap();

    for f in ["codec.ckpt", "lm.ckpt", "training.json", "report.txt", "provenance.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap(), out.report);

    let mut assignments = Vec::new();
    for task in Task::ALL {
        let m = load_manifest(&dir.path().join(format!("manifests/{task}.jsonl"))).unwrap();
        assert_eq!(m.task, task);
        assert_eq!(m.records.len(), 30);
        let mut by_artist = std::collections::BTreeMap::new();
        for r in &m.records {
            let prev = by_artist.insert(r.artist_id.clone().unwrap(), r.split);
            assert!(prev.is_none() || prev == Some(r.split), "artist spans splits");
        }
        assert!(Split::ALL.iter().all(|&s| m.count(s) > 0));
        assignments.push(m.records.iter().map(|r| (r.clip_id.clone(), r.split)).collect::<Vec<_>>());
    }
    assert!(assignments.windows(2).all(|w| w[0] == w[1]));

    let reps: BTreeSet<&str> = out.rows.iter().map(|r| r.representation.as_str()).collect();
    assert!(reps.contains("chroma") && reps.contains("mfcc"));
    for row in &out.rows {
        let tables: Vec<String> = Task::ALL
            .iter()
            .map(|t| {
                std::fs::read_to_string(dir.path().join(format!("grids/{}-{t}.jsonl", row.representation))).unwrap()
            })
            .collect();
        let refs: Vec<&str> = tables.iter().map(String::as_str).collect();
        let rebuilt = report_from_tables(&row.representation, &refs).unwrap();
        assert_eq!(rebuilt.representation, row.representation);
        for (a, b) in [
            (rebuilt.tagging, row.tagging),
            (rebuilt.genre, row.genre),
            (rebuilt.key, row.key),
            (rebuilt.emotion, row.emotion),
            (rebuilt.overall, row.overall),
        ] {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                _ => assert_eq!(a, b),
            }
        }
    }

    // A second run against the warm cache reproduces the report.
    let again = tempfile::tempdir().unwrap();
    let out2 = run_pipeline(&tiny(), again.path(), Some(cache.path())).unwrap();
    assert_eq!(out2.report, out.report);
}

#[test]
fn partial_config_keeps_defaults() {
    let text = r#"
seed = 7
codec_steps = 400

[synth]
clips = 120
ratios = [3.0, 1.0, 1.0]

[lm]
context = 64

[probe.schedule]
eval_every = 25
patience = 6
max_steps = 500
"#;
    let c = PipelineConfig::from_toml(text).unwrap();
    let d = PipelineConfig::default();
    assert_eq!((c.seed, c.codec_steps, c.synth.clips, c.lm.context), (7, 400, 120, 64));
    assert_eq!(c.synth.duration, d.synth.duration);
    assert_eq!(c.lm.d_model, d.lm.d_model);
    assert_eq!(c.probe.axes, d.probe.axes);
    assert_eq!(c.probe.schedule.max_steps, 500);
    c.validate().unwrap();
}
