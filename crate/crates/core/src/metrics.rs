//! Evaluation metrics and the per-task aggregation used in the summary table.
//!
//! `macro_auc`, `macro_ap` and `r_squared` return fractions; `accuracy` and
//! `weighted_key_score` return percentages. `MetricReport` holds everything
//! on the 0–100 scale.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::{KeyLabel, Mode};

/// A macro-averaged ranking score plus how many tags were skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroScore {
    pub value: f64,
    pub valid_tags: usize,
    pub excluded_tags: usize,
}

fn check_shapes(scores: &ArrayView2<f64>, labels: &ArrayView2<bool>) -> Result<()> {
    if scores.dim() != labels.dim() {
        return Err(Error::invalid(format!(
            "scores {:?} and labels {:?} differ in shape",
            scores.dim(),
            labels.dim()
        )));
    }
    Ok(())
}

/// 1-based ranks in ascending score order; tied scores share their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// ROC-AUC of one tag via the rank-sum statistic. `None` if one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Non-interpolated average precision of one tag, with tied scores forming a
/// single threshold. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut seen, mut hits, mut sum) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_hits = order[i..j].iter().filter(|&&k| labels[k]).count();
        seen += j - i;
        hits += group_hits;
        sum += group_hits as f64 * hits as f64 / seen as f64;
        i = j;
    }
    Some(sum / pos as f64)
}

fn macro_over_tags(
    scores: ArrayView2<f64>,
    labels: ArrayView2<bool>,
    metric: fn(&[f64], &[bool]) -> Option<f64>,
    name: &str,
) -> Result<MacroScore> {
    check_shapes(&scores, &labels)?;
    let mut values = Vec::new();
    for t in 0..scores.ncols() {
        let s: Vec<f64> = scores.column(t).to_vec();
        let l: Vec<bool> = labels.column(t).to_vec();
        if let Some(v) = metric(&s, &l) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::NoValidTag);
    }
    let excluded = scores.ncols() - values.len();
    if excluded > 0 {
        log::warn!("{name}: excluded {excluded} of {} tags with a single class", scores.ncols());
    }
    Ok(MacroScore {
        value: values.iter().sum::<f64>() / values.len() as f64,
        valid_tags: values.len(),
        excluded_tags: excluded,
    })
}

/// Macro-averaged ROC-AUC over tags (columns).
pub fn macro_auc(scores: ArrayView2<f64>, labels: ArrayView2<bool>) -> Result<MacroScore> {
    macro_over_tags(scores, labels, auc, "macro_auc")
}

/// Macro-averaged average precision over tags (columns).
pub fn macro_ap(scores: ArrayView2<f64>, labels: ArrayView2<bool>) -> Result<MacroScore> {
    macro_over_tags(scores, labels, average_precision, "macro_ap")
}

/// Partial credit for one key estimate.
pub fn key_credit(truth: KeyLabel, estimate: KeyLabel) -> f64 {
    let (rt, et) = (truth.tonic(), estimate.tonic());
    if truth == estimate {
        1.0
    } else if truth.mode() == estimate.mode() && et == (rt + 7) % 12 {
        0.5
    } else if truth.mode() == Mode::Major && estimate.mode() == Mode::Minor && et == (rt + 9) % 12
        || truth.mode() == Mode::Minor && estimate.mode() == Mode::Major && et == (rt + 3) % 12
    {
        0.3
    } else if rt == et {
        0.2
    } else {
        0.0
    }
}

/// Mean key credit × 100.
pub fn weighted_key_score(predictions: &[KeyLabel], truths: &[KeyLabel]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::invalid("weighted key score needs at least one pair"));
    }
    let total: f64 = predictions.iter().zip(truths).map(|(&p, &t)| key_credit(t, p)).sum();
    Ok(100.0 * total / predictions.len() as f64)
}

/// Coefficient of determination, as a fraction.
pub fn r_squared(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: targets.len(),
        });
    }
    if targets.len() < 2 {
        return Err(Error::invalid("r_squared needs at least two targets"));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = predictions.iter().zip(targets).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fraction of exact matches × 100.
pub fn accuracy<T: PartialEq>(predictions: &[T], truths: &[T]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy needs at least one prediction"));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Per-metric scores on the 0–100 scale, in summary-table column order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub tagging_auc: Option<f64>,
    pub tagging_ap: Option<f64>,
    pub genre_accuracy: Option<f64>,
    pub key_weighted: Option<f64>,
    pub emotion_r2_arousal: Option<f64>,
    pub emotion_r2_valence: Option<f64>,
}

impl MetricScores {
    /// Build from the six summary-table columns.
    pub fn from_row(row: [f64; 6]) -> Self {
        Self {
            tagging_auc: Some(row[0]),
            tagging_ap: Some(row[1]),
            genre_accuracy: Some(row[2]),
            key_weighted: Some(row[3]),
            emotion_r2_arousal: Some(row[4]),
            emotion_r2_valence: Some(row[5]),
        }
    }

    fn columns(&self) -> [(&'static str, &'static str, Option<f64>); 6] {
        [
            ("tagging", "auc", self.tagging_auc),
            ("tagging", "ap", self.tagging_ap),
            ("genre", "accuracy", self.genre_accuracy),
            ("key", "weighted", self.key_weighted),
            ("emotion", "r2_arousal", self.emotion_r2_arousal),
            ("emotion", "r2_valence", self.emotion_r2_valence),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub representation: String,
    pub scores: MetricScores,
    pub tagging: Option<f64>,
    pub genre: Option<f64>,
    pub key: Option<f64>,
    pub emotion: Option<f64>,
    /// Present only when all four tasks are scored.
    pub overall: Option<f64>,
}

fn mean2(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? + b?) / 2.0)
}

/// Average multi-metric tasks first, then the four tasks.
pub fn aggregate_report(representation: &str, scores: MetricScores) -> MetricReport {
    let tagging = mean2(scores.tagging_auc, scores.tagging_ap);
    let genre = scores.genre_accuracy;
    let key = scores.key_weighted;
    let emotion = mean2(scores.emotion_r2_arousal, scores.emotion_r2_valence);
    let overall = match (tagging, genre, key, emotion) {
        (Some(a), Some(b), Some(c), Some(d)) => Some((a + b + c + d) / 4.0),
        _ => None,
    };
    MetricReport {
        representation: representation.to_string(),
        scores,
        tagging,
        genre,
        key,
        emotion,
        overall,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))
}

impl MetricReport {
    /// One `representation\ttask\tmetric\tvalue` line per metric; gaps are skipped.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for (task, metric, value) in self.scores.columns() {
            if let Some(v) = value {
                let _ = writeln!(out, "{}\t{task}\t{metric}\t{v:.6}", self.representation);
            }
        }
        for (task, value) in [
            ("tagging", self.tagging),
            ("genre", self.genre),
            ("key", self.key),
            ("emotion", self.emotion),
            ("overall", self.overall),
        ] {
            if let Some(v) = value {
                let _ = writeln!(out, "{}\t{task}\taverage\t{v:.6}", self.representation);
            }
        }
        out
    }
}

/// Summary table with one row per representation; missing values print as `-`.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let header = [
        "Representation",
        "Tag AUC",
        "Tag AP",
        "Genre Acc",
        "Key Wt",
        "Emo A",
        "Emo V",
        "Average",
    ];
    let width = reports
        .iter()
        .map(|r| r.representation.len())
        .chain([header[0].len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{:<width$}", header[0]);
    for h in &header[1..] {
        let _ = write!(out, "  {h:>9}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<width$}", r.representation);
        for (_, _, v) in r.scores.columns() {
            let _ = write!(out, "  {:>9}", cell(v));
        }
        let _ = writeln!(out, "  {:>9}", cell(r.overall));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    fn lab(v: &[u8]) -> Array2<bool> {
        Array2::from_shape_vec((v.len(), 1), v.iter().map(|&x| x == 1).collect()).unwrap()
    }

    #[test]
    fn auc_examples() {
        let s = col(&[0.1, 0.9, 0.5]);
        assert_eq!(macro_auc(s.view(), lab(&[0, 1, 0]).view()).unwrap().value, 1.0);
        // both positives (0.1, 0.5) sit below the lone negative (0.9)
        assert_eq!(macro_auc(s.view(), lab(&[1, 0, 1]).view()).unwrap().value, 0.0);
        let flat = col(&[0.3; 5]);
        assert_eq!(macro_auc(flat.view(), lab(&[1, 0, 0, 1, 0]).view()).unwrap().value, 0.5);
    }

    #[test]
    fn auc_skips_single_class_tags() {
        let s = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, 0.9, 0.3, 0.5, 0.4]).unwrap();
        let l = Array2::from_shape_vec((3, 2), vec![false, true, true, true, false, true]).unwrap();
        let m = macro_auc(s.view(), l.view()).unwrap();
        assert_eq!((m.valid_tags, m.excluded_tags), (1, 1));
        assert!(matches!(
            macro_auc(col(&[0.1, 0.2]).view(), lab(&[1, 1]).view()),
            Err(Error::NoValidTag)
        ));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.9], &[true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.4, 0.7], &[true, true]), Some(1.0));
        assert_eq!(average_precision(&[0.4, 0.7], &[false, false]), None);
        // tied scores share one threshold, whatever their order
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(0.5));
        let a = average_precision(&[0.9, 0.5, 0.5, 0.1], &[false, true, false, true]).unwrap();
        assert!((a - (0.5 * 1.0 / 3.0 + 0.5 * 2.0 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn key_credits() {
        let k = |s: &str| s.parse::<KeyLabel>().unwrap();
        assert_eq!(key_credit(k("C major"), k("C major")), 1.0);
        assert_eq!(key_credit(k("C major"), k("G major")), 0.5);
        assert_eq!(key_credit(k("C major"), k("F major")), 0.0);
        assert_eq!(key_credit(k("C major"), k("A minor")), 0.3);
        assert_eq!(key_credit(k("A minor"), k("C major")), 0.3);
        assert_eq!(key_credit(k("C major"), k("C minor")), 0.2);
        let all: Vec<KeyLabel> = KeyLabel::all().collect();
        assert_eq!(weighted_key_score(&all, &all).unwrap(), 100.0);
        assert!(weighted_key_score(&all[..2], &all[..3]).is_err());
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&[-1.0, 1.0], &[1.0, -1.0]).unwrap(), -3.0);
        assert!(matches!(r_squared(&[1.0, 2.0], &[4.0, 4.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 2], &[2, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(), 75.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn aggregation_rows() {
        let juke = aggregate_report("Jukebox", MetricScores::from_row([91.5, 41.4, 79.7, 66.7, 72.1, 61.7]));
        assert!((juke.overall.unwrap() - 69.9375).abs() < 1e-9);
        assert_eq!(format!("{:.1}", juke.overall.unwrap()), "69.9");
        let musicnn = aggregate_report("MusiCNN", MetricScores::from_row([90.6, 38.3, 79.0, 12.8, 70.3, 46.6]));
        assert_eq!(format!("{:.1}", musicnn.overall.unwrap()), "53.7");
        let full = aggregate_report("x", MetricScores::from_row([100.0; 6]));
        assert_eq!(full.overall, Some(100.0));
    }

    #[test]
    fn missing_task_leaves_a_gap() {
        let mut s = MetricScores::from_row([80.0; 6]);
        s.key_weighted = None;
        let r = aggregate_report("partial", s);
        assert_eq!(r.overall, None);
        assert_eq!(r.tagging, Some(80.0));
        let table = summary_table(&[r.clone()]);
        assert!(table.lines().nth(1).unwrap().contains(" -"));
        assert!(!r.records().contains("\tkey\t"));
    }
}
