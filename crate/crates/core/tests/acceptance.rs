//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Tolerances are fixed here. The desk pipeline run (criteria 8 and 9) takes
//! several minutes on one core.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;

use jukeprobe::audio::synth_corpus;
use jukeprobe::data::{artist_stratified_split, ManifestRecord, Split};
use jukeprobe::extract::{activation_budget, middle_layer, pooled_budget};
use jukeprobe::features::{baseline_representation, BaselineConfig, Family};
use jukeprobe::key::{KeyLabel, Mode};
use jukeprobe::lm::{Block, LanguageModel, LmConfig};
use jukeprobe::metrics::{aggregate_report, macro_ap, macro_auc, weighted_key_score, MetricScores};
use jukeprobe::nn::{gradcheck, normal_matrix, Params};
use jukeprobe::pipeline::{run_pipeline, PipelineConfig, ProbeStage};
use jukeprobe::probe::{Encoded, GridAxes, ProbeModel, ProbeNet, Schedule, Target, Task};
use jukeprobe::{codec, par, rng};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 1. Grid fidelity.
fn grid_fidelity() -> Outcome {
    let axes = GridAxes::default();
    let n = axes.configs().len();
    let expected = GridAxes {
        standardize: vec![false, true],
        model: vec![ProbeModel::Linear, ProbeModel::Mlp512],
        batch_size: vec![64, 256],
        learning_rate: vec![1e-5, 1e-4, 1e-3],
        dropout: vec![0.25, 0.5, 0.75],
        l2: vec![0.0, 1e-4, 1e-3],
    };
    let mut deletions = 0;
    let mut bad = Vec::new();
    for axis in 0..6 {
        let sizes = [2usize, 2, 2, 3, 3, 3];
        for drop in 0..sizes[axis] {
            let mut a = axes.clone();
            match axis {
                0 => drop_at(&mut a.standardize, drop),
                1 => drop_at(&mut a.model, drop),
                2 => drop_at(&mut a.batch_size, drop),
                3 => drop_at(&mut a.learning_rate, drop),
                4 => drop_at(&mut a.dropout, drop),
                _ => drop_at(&mut a.l2, drop),
            }
            let want = 216 / sizes[axis] * (sizes[axis] - 1);
            let got = a.configs().len();
            deletions += 1;
            if got != want {
                bad.push(format!("axis {axis} drop {drop}: {got} != {want}"));
            }
        }
    }
    check(
        n == 216 && axes == expected && bad.is_empty(),
        format!("{n} configs, value sets match, {deletions} single-value deletions checked {bad:?}"),
    )
}

fn drop_at<T>(v: &mut Vec<T>, i: usize) {
    v.remove(i);
}

/// 2. Baseline dimensionality.
fn baseline_dims() -> Outcome {
    let (clip, _) = synth_corpus(1, 2.0, 3).remove(0);
    let cfg = BaselineConfig::default();
    let chroma = baseline_representation(&clip, &Family::Chroma, &cfg, "a").map_err(|e| e.to_string())?;
    let mfcc = baseline_representation(&clip, &Family::Mfcc, &cfg, "a").map_err(|e| e.to_string())?;
    check(
        chroma.dims() == 72 && mfcc.dims() == 120,
        format!("chroma {} dims, mfcc {} dims", chroma.dims(), mfcc.dims()),
    )
}

/// 3. Key-score oracle against the reference convention fixture.
fn key_oracle() -> Outcome {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/key_credit_reference.tsv"))
        .map_err(|e| e.to_string())?;
    let mut pairs = 0;
    let mut mismatches = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let key = |tonic: &str, mode: &str| {
            let mode = if mode == "major" { Mode::Major } else { Mode::Minor };
            KeyLabel::new(tonic.parse().expect("tonic"), mode).expect("key")
        };
        let truth = key(f[0], f[1]);
        let estimate = key(f[2], f[3]);
        let want: f64 = f[4].parse().map_err(|e| format!("{e}"))?;
        let got = weighted_key_score(&[estimate], &[truth]).map_err(|e| e.to_string())? / 100.0;
        pairs += 1;
        if got != want {
            mismatches += 1;
        }
    }
    check(pairs == 576 && mismatches == 0, format!("{pairs} pairs, {mismatches} mismatches (exact)"))
}

fn brute_auc(s: &[f64], l: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn brute_ap(s: &[f64], l: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| l[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= s[i]).collect();
            above.iter().filter(|&&j| l[j]).count() as f64 / above.len() as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn brute_macro(s: ArrayView2<f64>, l: ArrayView2<bool>, f: fn(&[f64], &[bool]) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = (0..s.ncols())
        .filter_map(|t| f(&s.column(t).to_vec(), &l.column(t).to_vec()))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// 4. Ranking metrics against brute-force enumeration.
fn ranking_oracles() -> Outcome {
    let mut g = rng::from_seed(4);
    let (mut worst, mut compared, mut both_undefined) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let n = g.random_range(1..=12);
        let tags = g.random_range(1..=4);
        // a coarse score grid makes ties common
        let levels = g.random_range(2..=8);
        let s = Array2::from_shape_fn((n, tags), |_| g.random_range(0..levels) as f64 / levels as f64);
        let l = Array2::from_shape_fn((n, tags), |_| g.random_bool(0.4));
        for (ours, oracle) in [
            (macro_auc(s.view(), l.view()).ok().map(|m| m.value), brute_macro(s.view(), l.view(), brute_auc)),
            (macro_ap(s.view(), l.view()).ok().map(|m| m.value), brute_macro(s.view(), l.view(), brute_ap)),
        ] {
            match (ours, oracle) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    compared += 1;
                }
                (None, None) => both_undefined += 1,
                (a, b) => return Err(format!("definedness differs: ours {a:?}, oracle {b:?}")),
            }
        }
    }
    check(
        worst <= 1e-12,
        format!("1000 instances, {compared} scores compared, {both_undefined} undefined on both sides, max |diff| {worst:.2e} (tol 1e-12)"),
    )
}

/// 5. Aggregation arithmetic on Table 3 rows.
fn aggregation() -> Outcome {
    // columns: tag AUC, tag AP, genre, key, arousal, valence
    let jukebox = aggregate_report("jukebox", MetricScores::from_row([91.5, 41.4, 79.7, 66.7, 72.1, 61.7]));
    let musicnn = aggregate_report("musicnn", MetricScores::from_row([90.6, 38.3, 79.0, 12.8, 70.3, 46.6]));
    let j = format!("{:.1}", jukebox.overall.unwrap_or(f64::NAN));
    let m = format!("{:.1}", musicnn.overall.unwrap_or(f64::NAN));
    check(j == "69.9" && m == "53.7", format!("jukebox {j}, musicnn {m}"))
}

/// 6. Finite-difference gradient checks.
fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut g = rng::from_seed(6);

    let block = Block::new(&mut g, 8, 2, 4, 0.4, 0.4);
    let x = normal_matrix(&mut g, 6, 8, 1.0);
    let r = normal_matrix(&mut g, 6, 8, 1.0);
    let (_, cache) = block.forward_train(&x);
    let mut grad = block.clone();
    grad.zero();
    block.backward(&cache, &r, &mut grad);
    let e_block = gradcheck::max_relative_error(&block, &grad, |b| (b.forward(&x) * &r).sum(), 1e-5, usize::MAX);

    let net = ProbeNet::mlp(&mut g, 5, 7, 3);
    let px = normal_matrix(&mut g, 9, 5, 1.0);
    let y = Encoded::new(&(0..9).map(|i| Target::Class(i % 3)).collect::<Vec<_>>(), Task::Genre);
    let (_, pgrad) = net.loss_and_grads(&px, &y, 1e-3, None);
    let e_probe = gradcheck::max_relative_error(&net, &pgrad, |n| n.loss_and_grads(&px, &y, 1e-3, None).0, 1e-5, usize::MAX);

    let cfg = codec::CodecConfig {
        sample_rate: 1000,
        strides: vec![2, 2],
        channels: vec![3, 4],
        res_dilations: vec![1, 3],
        latent_dim: 3,
        vocab: 8,
        ..codec::CodecConfig::default()
    };
    let c = codec::Codec::new(cfg, 7).map_err(|e| e.to_string())?;
    let signal: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 0.8).collect();
    let pass = c.net.loss_and_grads(&signal, None, 0.0).map_err(|e| e.to_string())?;
    let e_codec = gradcheck::max_relative_error(
        &c.net,
        &pass.grads,
        |n| n.loss_and_grads(&signal, None, 0.0).expect("toy pass").loss.recon,
        1e-5,
        usize::MAX,
    );
    let secs = t.elapsed().as_secs_f64();
    check(
        e_block < 1e-4 && e_probe < 1e-4 && e_codec < 1e-4 && secs < 60.0,
        format!("max rel err (floor 1e-3 of tensor scale): block {e_block:.1e}, mlp probe {e_probe:.1e}, codec {e_codec:.1e} (tol 1e-4); {secs:.1}s (limit 60s)"),
    )
}

/// 7. Causality by exhaustive perturbation.
fn causality() -> Outcome {
    let cfg = LmConfig {
        vocab: 16,
        layers: 2,
        d_model: 16,
        heads: 2,
        context: 16,
        init_std: 0.3,
        ..LmConfig::default()
    };
    let lm = LanguageModel::new(cfg, 7).map_err(|e| e.to_string())?;
    let mut g = rng::from_seed(7);
    let base: Vec<u32> = (0..16).map(|_| g.random_range(0..16)).collect();
    let (ref_logits, _) = lm.forward(&base, None, &[]).map_err(|e| e.to_string())?;
    let offset = ref_logits.nrows() - 16;
    let mut perturbations = 0;
    let mut leaks = 0;
    for pos in 0..16 {
        for v in 0..16u32 {
            if v == base[pos] {
                continue;
            }
            let mut seq = base.clone();
            seq[pos] = v;
            let (logits, _) = lm.forward(&seq, None, &[]).map_err(|e| e.to_string())?;
            perturbations += 1;
            for t in 0..pos {
                if logits.row(offset + t) != ref_logits.row(offset + t) {
                    leaks += 1;
                }
            }
            if pos > 0 && logits.row(offset + pos) == ref_logits.row(offset + pos) {
                return Err(format!("token {pos} does not affect its own position"));
            }
        }
    }
    check(
        leaks == 0,
        format!("{perturbations} single-token perturbations of a 16-token sequence, {leaks} earlier positions changed"),
    )
}

fn desk_config() -> PipelineConfig {
    PipelineConfig::default()
}

/// Upper bound on CPU-minutes: wall-clock minutes times worker threads.
fn cpu_minutes(secs: f64) -> f64 {
    secs / 60.0 * par::current_workers() as f64
}

/// 8 and 9. Desk-scale learning and end-to-end signal from one pipeline run.
fn desk_run(out: &Path) -> (Outcome, Outcome, Outcome) {
    let config = desk_config();
    let t = Instant::now();
    let run = match run_pipeline(&config, out, None) {
        Ok(r) => r,
        Err(e) => {
            let msg = format!("pipeline failed: {e}");
            return (Err(msg.clone()), Err(msg.clone()), Err(msg));
        }
    };
    let total = cpu_minutes(t.elapsed().as_secs_f64());
    let stage = |name: &str| {
        cpu_minutes(run.timings.iter().filter(|(s, _)| *s == name).map(|(_, v)| v).sum())
    };
    let tr = &run.training;
    let codec_min = stage("train-codec");
    let lm_min = stage("train-lm");
    let ratio = tr.codec_recon_mse / tr.codec_recon_mse_init;
    let a = check(
        ratio <= 0.5 && codec_min <= 10.0 && config.synth.clips >= 200 && config.synth.duration <= 10.0,
        format!(
            "{} clips × {} s; held-out recon MSE {:.4} → {:.4} ({:.0}% drop, need ≥ 50%) in {codec_min:.1} CPU-min (limit 10)",
            config.synth.clips,
            config.synth.duration,
            tr.codec_recon_mse_init,
            tr.codec_recon_mse,
            100.0 * (1.0 - ratio)
        ),
    );
    let b = check(
        tr.lm_valid_ce < 0.9 * tr.uniform_ce && lm_min <= 10.0,
        format!(
            "validation CE {:.3} nats (init {:.3}) vs 0.9 ln K = {:.3}, in {lm_min:.1} CPU-min (limit 10)",
            tr.lm_valid_ce,
            tr.lm_valid_ce_init,
            0.9 * tr.uniform_ce
        ),
    );

    // end-to-end signal on the middle-layer representation
    let rep = format!("calm-L{}", middle_layer(config.lm.layers));
    let test_clips = |task: Task| {
        let m = jukeprobe::data::load_manifest(&out.join(format!("manifests/{task}.jsonl"))).expect("manifest");
        m.records.into_iter().filter(|r| r.split == Split::Test).collect::<Vec<ManifestRecord>>()
    };
    let acc = |task: Task| {
        run.grids
            .get(&(rep.clone(), task))
            .and_then(|g| g.best().test.as_ref())
            .and_then(|t| t.get("accuracy"))
            .unwrap_or(f64::NAN)
    };
    let key_n = test_clips(Task::Key).len() as f64;
    let p0 = 1.0 / 24.0;
    let key_bar = 100.0 * (p0 + 3.0 * (p0 * (1.0 - p0) / key_n).sqrt());
    let genre_records = test_clips(Task::Genre);
    let genre_n = genre_records.len() as f64;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &genre_records {
        if let Target::Class(c) = r.label {
            *counts.entry(c).or_default() += 1;
        }
    }
    let pm = counts.values().copied().max().unwrap_or(0) as f64 / genre_n;
    let genre_bar = 100.0 * (pm + 3.0 * (pm * (1.0 - pm) / genre_n).sqrt());
    let (key_acc, genre_acc) = (acc(Task::Key), acc(Task::Genre));
    let c = check(
        key_acc > key_bar && genre_acc > genre_bar && total <= 30.0,
        format!(
            "{rep}: key acc {key_acc:.1}% vs {key_bar:.1}% (1/24 + 3σ, n={key_n}); genre acc {genre_acc:.1}% vs {genre_bar:.1}% (majority {:.1}% + 3σ, n={genre_n}); total {total:.1} CPU-min (limit 30)",
            100.0 * pm
        ),
    );
    println!("{}", run.report.lines().take(4).collect::<Vec<_>>().join("\n"));
    (a, b, c)
}

/// 10. Extraction arithmetic at reference scale.
fn extraction_arithmetic() -> Outcome {
    let reference = LmConfig::reference();
    let cfg = LmConfig {
        layers: 72,
        d_model: 4800,
        ..reference
    };
    let act = activation_budget(8192, &cfg);
    let pooled = pooled_budget(&cfg);
    let mid = middle_layer(72);
    check(
        act > 10_000_000_000 && (pooled as f64 / 1e6 - 1.4).abs() < 0.05 && mid == 36,
        format!("activations {:.2} GB (> 10 GB), pooled {:.3} MB (≈ 1.4 MB), middle_layer(72) = {mid}", act as f64 / 1e9, pooled as f64 / 1e6),
    )
}

fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.seed = 11;
    c.synth.clips = 48;
    c.synth.duration = 2.0;
    c.codec_steps = 20;
    c.lm_steps = 20;
    c.lm.context = 64;
    c.probe = ProbeStage {
        axes: GridAxes {
            standardize: vec![true],
            model: vec![ProbeModel::Linear, ProbeModel::Mlp512],
            batch_size: vec![64],
            learning_rate: vec![1e-3],
            dropout: vec![0.5],
            l2: vec![1e-4],
        },
        schedule: Schedule {
            eval_every: 5,
            patience: 2,
            max_steps: 40,
        },
    };
    c
}

/// 11. Byte-identical reruns and worker-count independence.
fn determinism(root: &Path) -> Outcome {
    let config = small_config();
    let mut outputs = Vec::new();
    for (name, workers) in [("a", 1usize), ("b", 1), ("c", 3)] {
        let dir = root.join(name);
        par::with_workers(workers, || run_pipeline(&config, &dir, None)).map_err(|e| e.to_string())?;
        let files = ["report.txt", "provenance.json"].map(|f| std::fs::read(dir.join(f)).unwrap_or_default());
        outputs.push(files);
    }
    let rerun = outputs[0] == outputs[1];
    let workers = outputs[0] == outputs[2];
    let artifacts = serde_json::from_slice::<serde_json::Value>(&outputs[0][1])
        .ok()
        .and_then(|v| v["artifacts"].as_object().map(|o| o.len()))
        .unwrap_or(0);
    check(
        rerun && workers && !outputs[0][0].is_empty(),
        format!("full pipeline ×3 (workers 1, 1, 3): report and provenance ({artifacts} artifact digests) identical: rerun {rerun}, workers {workers}"),
    )
}

/// 12. Split hygiene over random artist/clip configurations.
fn split_hygiene() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec(1usize..30, 1..40),
        prop::collection::vec(0.2f64..10.0, 1..=3),
        any::<u64>(),
    );
    let result = runner.run(&strategy, |(sizes, ratios, seed)| {
        let mut records = Vec::new();
        for (a, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                records.push(ManifestRecord {
                    clip_id: format!("{a}-{k}"),
                    audio: format!("{a}-{k}.wav").into(),
                    split: Split::Train,
                    artist_id: Some(format!("artist-{a}")),
                    label: Target::Class(0),
                });
            }
        }
        artist_stratified_split(&mut records, &ratios, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut home: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &records {
            let a = r.artist_id.as_deref().expect("artist");
            let prev = *home.entry(a).or_insert(r.split);
            prop_assert_eq!(prev, r.split, "artist {} in two splits", a);
        }
        Ok(())
    });
    check(result.is_ok(), format!("1000 random configurations: {}", match result {
        Ok(()) => "no artist in two splits".to_string(),
        Err(e) => e.to_string(),
    }))
}

fn flat(o: Outcome) -> String {
    match o {
        Ok(d) => format!("ok: {d}"),
        Err(d) => format!("FAILED: {d}"),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "grid fidelity", grid_fidelity()),
        (2, "baseline dimensionality", baseline_dims()),
        (3, "key-score oracle", key_oracle()),
        (4, "ranking-metric oracles", ranking_oracles()),
        (5, "aggregation arithmetic", aggregation()),
        (6, "gradient checks", gradient_checks()),
        (7, "causality", causality()),
    ];
    let (a, b, e2e) = desk_run(&tmp.path().join("desk"));
    let learning = match (a, b) {
        (Ok(a), Ok(b)) => Ok(format!("(a) {a}; (b) {b}")),
        (a, b) => Err(format!("(a) {}; (b) {}", flat(a), flat(b))),
    };
    results.push((8, "desk-scale learning", learning));
    results.push((9, "end-to-end signal", e2e));
    results.push((10, "extraction arithmetic", extraction_arithmetic()));
    results.push((11, "determinism", determinism(&tmp.path().join("det"))));
    results.push((12, "split hygiene", split_hygiene()));

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("PASS [{n}] {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{n}] {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
