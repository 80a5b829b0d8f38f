//! From score curves to evaluated keyword detections.
//!
//! Scores are binarized per keyword; every maximal run of frames at or above
//! the threshold is one candidate. Candidates of one recording are then
//! de-overlapped (the higher score keeps contested frames) and candidates
//! shorter than half their template are discarded. Evaluation matches
//! detections to ground truth one-to-one with onset/offset collars and pools
//! the counts over keywords.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtw::KeywordCurve;
use crate::error::{KwsError, Result};
use crate::tensorio::AnnotationSet;

/// A detected keyword occurrence, times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub file_id: String,
    pub keyword: String,
    pub onset: f64,
    pub offset: f64,
    pub score: f64,
}

/// Decision threshold, global or per keyword.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Global(f64),
    /// Keywords missing from `values` use `fallback`.
    PerKeyword {
        values: BTreeMap<String, f64>,
        fallback: f64,
    },
}

impl Threshold {
    pub fn for_keyword(&self, keyword: &str) -> f64 {
        match self {
            Threshold::Global(t) => *t,
            Threshold::PerKeyword { values, fallback } => {
                values.get(keyword).copied().unwrap_or(*fallback)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self {
            Threshold::Global(t) => t.is_finite(),
            Threshold::PerKeyword { values, fallback } => {
                fallback.is_finite() && values.values().all(|t| t.is_finite())
            }
        };
        if finite {
            Ok(())
        } else {
            Err(KwsError::Parameter("thresholds must be finite".into()))
        }
    }
}

/// Tolerances for matching a detection to a ground-truth event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub onset_collar_seconds: f64,
    pub offset_collar_seconds: f64,
    /// The offset tolerance grows to this fraction of the truth duration.
    pub offset_ratio: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            onset_collar_seconds: 0.25,
            offset_collar_seconds: 0.25,
            offset_ratio: 0.5,
        }
    }
}

impl MatchingConfig {
    fn matches(&self, det: &DetectionEvent, onset: f64, offset: f64) -> bool {
        let offset_tol = self.offset_collar_seconds.max(self.offset_ratio * (offset - onset));
        (det.onset - onset).abs() <= self.onset_collar_seconds && (det.offset - offset).abs() <= offset_tol
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassCounts {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        Self {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

/// Event-based evaluation at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_keyword: BTreeMap<String, ClassCounts>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// F from the pooled counts.
    pub micro_f: f64,
    /// Mean of the per-keyword F values, for reference.
    pub macro_f: f64,
    pub threshold: Option<Threshold>,
}

pub fn write_eval_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).expect("reports are serializable");
    fs::write(path, text + "\n").map_err(|e| KwsError::io(path, e))
}

pub fn read_eval_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| KwsError::Format(format!("{}: {e}", path.display())))
}

/// A candidate detection in frames of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub keyword: String,
    pub start: usize,
    /// Exclusive end frame.
    pub end: usize,
    pub score: f64,
    /// Length of the template that produced the peak score.
    pub template_frames: usize,
}

impl Candidate {
    pub fn frames(&self) -> usize {
        self.end - self.start
    }
}

/// Maximal runs of `score >= threshold` per keyword. The onset comes from the
/// warp path behind the run's best frame, the end from the run itself.
pub fn threshold_scores(curves: &[KeywordCurve], thr: &Threshold) -> Vec<Candidate> {
    let mut out = Vec::new();
    for curve in curves {
        let t = thr.for_keyword(&curve.keyword);
        let mut j = 0;
        while j < curve.len() {
            if curve.scores[j] < t {
                j += 1;
                continue;
            }
            let run_start = j;
            let mut best = j;
            while j < curve.len() && curve.scores[j] >= t {
                if curve.scores[j] > curve.scores[best] {
                    best = j;
                }
                j += 1;
            }
            let start = curve.onsets[best].unwrap_or(run_start).min(run_start);
            out.push(Candidate {
                keyword: curve.keyword.clone(),
                start,
                end: j,
                score: curve.scores[best],
                template_frames: curve.template_frames_at(best).unwrap_or(0),
            });
        }
    }
    out
}

/// Resolves overlaps in favour of higher scores, then drops candidates shorter
/// than half their template. A candidate fragmented by higher-scoring ones
/// keeps its longest remaining span (the earliest on ties).
pub fn postprocess(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&candidates[a], &candidates[b]);
        y.score
            .total_cmp(&x.score)
            .then(x.start.cmp(&y.start))
            .then(x.keyword.cmp(&y.keyword))
            .then(a.cmp(&b))
    });
    let horizon = candidates.iter().map(|c| c.end).max().unwrap_or(0);
    let mut claimed = vec![false; horizon];
    let mut kept = Vec::new();
    for i in order {
        let c = &candidates[i];
        let (mut best, mut run) = ((0, 0), None);
        for f in c.start..=c.end {
            let free = f < c.end && !claimed[f];
            match (free, run) {
                (true, None) => run = Some(f),
                (false, Some(s)) => {
                    if f - s > best.1 - best.0 {
                        best = (s, f);
                    }
                    run = None;
                }
                _ => {}
            }
        }
        if best.1 > best.0 {
            claimed[best.0..best.1].iter_mut().for_each(|x| *x = true);
            kept.push(Candidate {
                start: best.0,
                end: best.1,
                ..c.clone()
            });
        }
    }
    kept.retain(|c| 2 * c.frames() >= c.template_frames);
    kept.sort_by(|a, b| a.start.cmp(&b.start).then(a.keyword.cmp(&b.keyword)));
    kept
}

pub fn to_events(file_id: &str, candidates: &[Candidate], hop_seconds: f64) -> Vec<DetectionEvent> {
    candidates
        .iter()
        .map(|c| DetectionEvent {
            file_id: file_id.to_string(),
            keyword: c.keyword.clone(),
            onset: c.start as f64 * hop_seconds,
            offset: c.end as f64 * hop_seconds,
            score: c.score,
        })
        .collect()
}

/// All keyword curves of one test recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FileCurves {
    pub file_id: String,
    pub curves: Vec<KeywordCurve>,
}

impl FileCurves {
    fn hop_seconds(&self) -> f64 {
        self.curves.first().map_or(0.0, |c| c.hop_seconds)
    }
}

/// Threshold and post-processing for one recording.
pub fn detect_file(file: &FileCurves, thr: &Threshold) -> Vec<DetectionEvent> {
    let candidates = threshold_scores(&file.curves, thr);
    to_events(&file.file_id, &postprocess(&candidates), file.hop_seconds())
}

pub fn detect_all(files: &[FileCurves], thr: &Threshold) -> Vec<DetectionEvent> {
    files.iter().flat_map(|f| detect_file(f, thr)).collect()
}

/// Micro-averaged event-based F-score. Within each (file, keyword) pair,
/// detections are taken by descending score and each claims the unmatched
/// truth with the closest onset among those within tolerance.
pub fn event_f_score(
    detections: &[DetectionEvent],
    truth: &AnnotationSet,
    matching: &MatchingConfig,
) -> Result<EvalReport> {
    type Key<'a> = (&'a str, &'a str);
    let mut truths: BTreeMap<Key, Vec<(f64, f64)>> = BTreeMap::new();
    for a in &truth.events {
        let list = truths.entry((&a.file_id, &a.keyword)).or_default();
        if list.contains(&(a.onset, a.offset)) {
            return Err(KwsError::Annotation(format!(
                "{}: duplicate {:?} event at {}..{}",
                a.file_id, a.keyword, a.onset, a.offset
            )));
        }
        list.push((a.onset, a.offset));
    }
    let mut dets: BTreeMap<Key, Vec<&DetectionEvent>> = BTreeMap::new();
    for d in detections {
        dets.entry((&d.file_id, &d.keyword)).or_default().push(d);
    }

    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let keys: BTreeSet<Key> = truths.keys().chain(dets.keys()).copied().collect();
    for key in keys {
        let t = truths.get(&key).map_or(&[][..], Vec::as_slice);
        let mut d = dets.get(&key).cloned().unwrap_or_default();
        d.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.onset.total_cmp(&b.onset))
                .then(a.offset.total_cmp(&b.offset))
        });
        let mut used = vec![false; t.len()];
        let mut tp = 0;
        for det in &d {
            let pick = (0..t.len())
                .filter(|&k| !used[k] && matching.matches(det, t[k].0, t[k].1))
                .min_by(|&a, &b| {
                    (det.onset - t[a].0)
                        .abs()
                        .total_cmp(&(det.onset - t[b].0).abs())
                        .then(a.cmp(&b))
                });
            if let Some(k) = pick {
                used[k] = true;
                tp += 1;
            }
        }
        let c = counts.entry(key.1.to_string()).or_default();
        c.0 += tp;
        c.1 += d.len() - tp;
        c.2 += t.len() - tp;
    }

    let per_keyword: BTreeMap<String, ClassCounts> = counts
        .into_iter()
        .map(|(k, (tp, fp, fn_))| (k, ClassCounts::from_counts(tp, fp, fn_)))
        .collect();
    let (tp, fp, fn_) = per_keyword
        .values()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.fn_));
    let macro_f = if per_keyword.is_empty() {
        0.0
    } else {
        per_keyword.values().map(|c| c.f).sum::<f64>() / per_keyword.len() as f64
    };
    Ok(EvalReport {
        per_keyword,
        tp,
        fp,
        fn_,
        micro_f: ratio(2 * tp, 2 * tp + fp + fn_),
        macro_f,
        threshold: None,
    })
}

/// Threshold, post-process and evaluate.
pub fn evaluate_at(
    files: &[FileCurves],
    truth: &AnnotationSet,
    thr: &Threshold,
    matching: &MatchingConfig,
) -> Result<EvalReport> {
    let mut report = event_f_score(&detect_all(files, thr), truth, matching)?;
    report.threshold = Some(thr.clone());
    Ok(report)
}

/// `n` evenly spaced thresholds between the smallest and largest finite score.
pub fn score_grid(files: &[FileCurves], n: usize) -> Vec<f64> {
    let (lo, hi) = files
        .iter()
        .flat_map(|f| &f.curves)
        .flat_map(|c| &c.scores)
        .filter(|s| s.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if lo > hi {
        return vec![0.0];
    }
    if lo == hi || n < 2 {
        return vec![lo];
    }
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
        .collect()
}

pub const DEFAULT_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    #[default]
    Global,
    /// Starts from the best global threshold and refines each keyword in
    /// name order, once.
    PerKeyword,
}

impl FromStr for SweepMode {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SweepMode::Global),
            "per_keyword" => Ok(SweepMode::PerKeyword),
            other => Err(KwsError::Config(format!("unknown sweep mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: Threshold,
    pub best_report: EvalReport,
    /// Global sweep, in grid order.
    pub points: Vec<SweepPoint>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(KwsError::Parameter("threshold grid is empty".into()));
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(KwsError::Parameter("threshold grid must be finite and sorted".into()));
    }
    Ok(())
}

/// First index of the maximum; the grid is sorted, so ties go to the lowest threshold.
fn argmax_f(reports: &[EvalReport]) -> usize {
    let mut best = 0;
    for (k, r) in reports.iter().enumerate() {
        if r.micro_f > reports[best].micro_f {
            best = k;
        }
    }
    best
}

pub fn sweep_threshold(
    files: &[FileCurves],
    truth: &AnnotationSet,
    grid: &[f64],
    matching: &MatchingConfig,
    mode: SweepMode,
) -> Result<SweepResult> {
    check_grid(grid)?;
    let reports = grid
        .par_iter()
        .map(|&t| evaluate_at(files, truth, &Threshold::Global(t), matching))
        .collect::<Result<Vec<_>>>()?;
    let gi = argmax_f(&reports);
    let mut best = Threshold::Global(grid[gi]);
    let mut best_report = reports[gi].clone();

    if mode == SweepMode::PerKeyword {
        let keywords: BTreeSet<&str> = files
            .iter()
            .flat_map(|f| &f.curves)
            .map(|c| c.keyword.as_str())
            .collect();
        let mut values: BTreeMap<String, f64> =
            keywords.iter().map(|k| (k.to_string(), grid[gi])).collect();
        for kw in keywords {
            let trial = grid
                .par_iter()
                .map(|&t| {
                    let mut v = values.clone();
                    v.insert(kw.to_string(), t);
                    evaluate_at(files, truth, &Threshold::PerKeyword { values: v, fallback: grid[gi] }, matching)
                })
                .collect::<Result<Vec<_>>>()?;
            let j = argmax_f(&trial);
            values.insert(kw.to_string(), grid[j]);
            best_report = trial[j].clone();
        }
        best = Threshold::PerKeyword {
            values,
            fallback: grid[gi],
        };
        best_report.threshold = Some(best.clone());
    }

    Ok(SweepResult {
        best,
        best_report,
        points: grid
            .iter()
            .zip(reports)
            .map(|(&threshold, report)| SweepPoint { threshold, report })
            .collect(),
    })
}

/// Oracle-vs-estimated threshold comparison on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub validation_threshold: f64,
    pub oracle_threshold: f64,
    /// `oracle - validation`.
    pub delta_threshold: f64,
    pub f_estimated: f64,
    pub f_oracle: f64,
    /// `f_oracle - f_estimated`, never negative.
    pub delta_f: f64,
}

/// Compares the global threshold estimated on `validation` with the one that
/// is optimal for `test`, both over `grid`.
pub fn threshold_gap_analysis(
    validation: (&[FileCurves], &AnnotationSet),
    test: (&[FileCurves], &AnnotationSet),
    grid: &[f64],
    matching: &MatchingConfig,
) -> Result<GapResult> {
    let val = sweep_threshold(validation.0, validation.1, grid, matching, SweepMode::Global)?;
    let oracle = sweep_threshold(test.0, test.1, grid, matching, SweepMode::Global)?;
    let (Threshold::Global(t_val), Threshold::Global(t_test)) = (&val.best, &oracle.best) else {
        unreachable!("global sweeps return global thresholds")
    };
    let idx = grid.iter().position(|g| g == t_val).expect("threshold from grid");
    let f_estimated = oracle.points[idx].report.micro_f;
    let f_oracle = oracle.best_report.micro_f;
    Ok(GapResult {
        validation_threshold: *t_val,
        oracle_threshold: *t_test,
        delta_threshold: t_test - t_val,
        f_estimated,
        f_oracle,
        delta_f: f_oracle - f_estimated,
    })
}
