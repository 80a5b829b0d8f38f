//! Subsequence DTW over embedding sequences.
//!
//! The cost of aligning query frame `i` with test frame `j` is
//! `1 - <q_i, t_j>`. A warping path starts at query row 0 in any test
//! column and ends at the last query row; its cost is the mean of the cells
//! it visits (sum of cell costs divided by the number of cells).
//!
//! Two recurrences are available:
//!
//! * [`Recurrence::Exact`] keeps, for every cell, the cheapest accumulated
//!   cost for every possible path length and normalizes only at the end
//!   cell. It returns the true minimum of the length-normalized cost over all
//!   admissible paths.
//! * [`Recurrence::Greedy`] stores one `(accumulated cost, length)` pair per
//!   cell and picks the predecessor minimizing the normalized cost at each
//!   position. It is cheaper (`O(T_query * T_test)`), but it can miss the
//!   optimum because comparing normalized prefixes does not account for the
//!   lengths still to come.
//!
//! Tie-break order in both is the step order of [`StepSizes`]; the default
//! order is `(1,1)`, `(2,1)`, `(1,2)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::tensorio::{dot, EmbeddingSequence, UNIT_NORM_TOL};

/// Slack below zero tolerated (and clamped) in unit-norm cost matrices.
pub const NEGATIVE_COST_TOL: f64 = 1e-6;

/// Admissible `(query advance, test advance)` transitions, in tie-break order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSizes(Vec<(usize, usize)>);

impl StepSizes {
    pub fn new(steps: Vec<(usize, usize)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(KwsError::Parameter("step set is empty".into()));
        }
        if steps.iter().any(|&(dq, dt)| dq == 0 || dt == 0) {
            return Err(KwsError::Parameter(
                "every step must advance both the query and the test axis".into(),
            ));
        }
        let mut seen = steps.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != steps.len() {
            return Err(KwsError::Parameter("duplicate step in step set".into()));
        }
        Ok(Self(steps))
    }

    pub fn as_slice(&self) -> &[(usize, usize)] {
        &self.0
    }

    fn max_test_advance(&self) -> usize {
        self.0.iter().map(|s| s.1).max().unwrap_or(1)
    }
}

impl Default for StepSizes {
    fn default() -> Self {
        Self(vec![(1, 1), (2, 1), (1, 2)])
    }
}

impl FromStr for StepSizes {
    type Err = KwsError;

    /// Parses `"1,1;2,1;1,2"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for part in s.split(';').filter(|p| !p.trim().is_empty()) {
            let (a, b) = part
                .split_once(',')
                .ok_or_else(|| KwsError::Config(format!("bad step {part:?}, expected dq,dt")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| KwsError::Config(format!("bad step {part:?}")))
            };
            steps.push((parse(a)?, parse(b)?));
        }
        Self::new(steps).map_err(|e| KwsError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recurrence {
    #[default]
    Exact,
    Greedy,
}

impl FromStr for Recurrence {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Recurrence::Exact),
            "greedy" => Ok(Recurrence::Greedy),
            other => Err(KwsError::Config(format!("unknown recurrence {other:?}"))),
        }
    }
}

/// How strictly [`cost_matrix_with`] validates its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostPolicy {
    /// Inputs are expected to be unit norm: costs lie in `[0, 2]`, tiny
    /// negatives are clamped and larger ones rejected.
    UnitNorm,
    /// Calibrated rows may have any norm; costs lie in
    /// `[1 - max|q| max|t|, 1 + max|q| max|t|]`.
    Calibrated,
}

/// Pairwise alignment costs, `T_query x T_test`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    bound: (f64, f64),
}

impl CostMatrix {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(KwsError::Parameter(format!(
                "{} values do not form a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::Parameter("cost matrix contains non-finite values".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            values,
            rows,
            cols,
            bound: (lo, hi),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// The declared value range of this matrix.
    pub fn bound(&self) -> (f64, f64) {
        self.bound
    }

    /// Prepends `k` columns filled with `value` on the test axis.
    pub fn pad_front(&self, k: usize, value: f64) -> Self {
        let cols = self.cols + k;
        let mut values = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            values.extend(std::iter::repeat_n(value, k));
            values.extend_from_slice(&self.values[i * self.cols..(i + 1) * self.cols]);
        }
        Self {
            values,
            rows: self.rows,
            cols,
            bound: (self.bound.0.min(value), self.bound.1.max(value)),
        }
    }
}

/// Cost matrix for unit-norm inputs.
pub fn cost_matrix(query: &EmbeddingSequence, test: &EmbeddingSequence) -> Result<CostMatrix> {
    cost_matrix_with(query, test, CostPolicy::UnitNorm)
}

pub fn cost_matrix_with(
    query: &EmbeddingSequence,
    test: &EmbeddingSequence,
    policy: CostPolicy,
) -> Result<CostMatrix> {
    if query.dim() != test.dim() {
        return Err(KwsError::DimensionMismatch {
            expected: query.dim(),
            actual: test.dim(),
        });
    }
    let (rows, cols) = (query.len(), test.len());
    let mut values = Vec::with_capacity(rows * cols);
    for (i, q) in query.rows().enumerate() {
        for (j, t) in test.rows().enumerate() {
            let mut c = 1.0 - dot(q, t);
            if policy == CostPolicy::UnitNorm && c < 0.0 {
                if c < -NEGATIVE_COST_TOL {
                    return Err(KwsError::DegenerateInput(format!(
                        "negative cost {c} at ({i}, {j}); inputs are not unit norm"
                    )));
                }
                c = 0.0;
            }
            values.push(c);
        }
    }
    let bound = match policy {
        CostPolicy::UnitNorm => (0.0, 2.0 + UNIT_NORM_TOL),
        CostPolicy::Calibrated => {
            let m = query.max_row_norm() * test.max_row_norm();
            (1.0 - m, 1.0 + m)
        }
    };
    Ok(CostMatrix {
        values,
        rows,
        cols,
        bound,
    })
}

/// Best path ending in a given test column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnEnd {
    /// Test column where the path enters query row 0.
    pub onset: usize,
    /// Mean cell cost along the path.
    pub normalized_cost: f64,
    /// Number of cells visited.
    pub length: usize,
}

/// A materialized match with its warping path of `(query, test)` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub onset: usize,
    /// Last test column of the path (inclusive).
    pub offset: usize,
    pub normalized_cost: f64,
    pub path: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    query_len: usize,
    ends: Vec<Option<ColumnEnd>>,
    matches: Vec<Match>,
}

impl WarpResult {
    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn test_len(&self) -> usize {
        self.ends.len()
    }

    /// Best path ending at each test column (`None` if unreachable).
    pub fn ends(&self) -> &[Option<ColumnEnd>] {
        &self.ends
    }

    /// Local minima of the per-column cost curve, with backtracked paths.
    pub fn matches(&self) -> &[Match] {
        &self.matches
    }
}

/// Subsequence DTW with the exact recurrence.
pub fn subsequence_dtw(cost: &CostMatrix, steps: &StepSizes) -> Result<WarpResult> {
    subsequence_dtw_with(cost, steps, Recurrence::Exact)
}

fn check_reachable(cost: &CostMatrix, ends: &[Option<ColumnEnd>]) -> Result<()> {
    if ends.iter().all(Option::is_none) {
        return Err(KwsError::TooShort(format!(
            "no admissible path through a {}x{} cost matrix",
            cost.rows, cost.cols
        )));
    }
    Ok(())
}

/// Best path end per test column, without path recovery.
pub fn subsequence_ends(
    cost: &CostMatrix,
    steps: &StepSizes,
    recurrence: Recurrence,
) -> Result<Vec<Option<ColumnEnd>>> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(KwsError::TooShort("empty cost matrix".into()));
    }
    let ends = match recurrence {
        Recurrence::Exact => exact_ends(cost, steps),
        Recurrence::Greedy => greedy_ends(cost, steps).0,
    };
    check_reachable(cost, &ends)?;
    Ok(ends)
}

pub fn subsequence_dtw_with(
    cost: &CostMatrix,
    steps: &StepSizes,
    recurrence: Recurrence,
) -> Result<WarpResult> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(KwsError::TooShort("empty cost matrix".into()));
    }
    let (ends, greedy_steps) = match recurrence {
        Recurrence::Exact => (exact_ends(cost, steps), None),
        Recurrence::Greedy => {
            let (ends, table) = greedy_ends(cost, steps);
            (ends, Some(table))
        }
    };
    check_reachable(cost, &ends)?;
    let matches = local_minima(&ends)
        .into_iter()
        .map(|j| {
            let end = ends[j].expect("local minima are reachable");
            let path = match &greedy_steps {
                None => exact_path(cost, steps, j, &end),
                Some(table) => greedy_path(cost, steps, table, j),
            };
            Match {
                onset: end.onset,
                offset: j,
                normalized_cost: end.normalized_cost,
                path,
            }
        })
        .collect();
    Ok(WarpResult {
        query_len: cost.rows,
        ends,
        matches,
    })
}

fn local_minima(ends: &[Option<ColumnEnd>]) -> Vec<usize> {
    let c = |j: usize| ends[j].map_or(f64::INFINITY, |e| e.normalized_cost);
    (0..ends.len())
        .filter(|&j| {
            ends[j].is_some()
                && (j == 0 || c(j) < c(j - 1))
                && (j + 1 == ends.len() || c(j) <= c(j + 1))
        })
        .collect()
}

/// Per-column DP state of the exact recurrence: for each query row `i`
/// and path length `l` (1-based, `l <= i + 1`), the cheapest accumulated
/// cost and its onset. Stored as `[i * rows + (l - 1)]`.
struct ExactColumn {
    acc: Vec<f64>,
    onset: Vec<usize>,
}

impl ExactColumn {
    fn new(rows: usize) -> Self {
        Self {
            acc: vec![f64::INFINITY; rows * rows],
            onset: vec![0; rows * rows],
        }
    }
}

fn exact_ends(cost: &CostMatrix, steps: &StepSizes) -> Vec<Option<ColumnEnd>> {
    let (rows, cols) = (cost.rows, cost.cols);
    let ring = steps.max_test_advance() + 1;
    let mut columns: Vec<ExactColumn> = (0..ring).map(|_| ExactColumn::new(rows)).collect();
    let mut ends = Vec::with_capacity(cols);
    for j in 0..cols {
        let (cur, prev) = split_ring(&mut columns, j, ring);
        cur.acc.fill(f64::INFINITY);
        cur.acc[0] = cost.get(0, j);
        cur.onset[0] = j;
        for i in 1..rows {
            let c = cost.get(i, j);
            for l in 2..=i + 1 {
                let mut best = f64::INFINITY;
                let mut onset = 0;
                for &(dq, dt) in steps.as_slice() {
                    if dq > i || dt > j || l - 1 > i - dq + 1 {
                        continue;
                    }
                    let p = prev(dt);
                    let k = (i - dq) * rows + (l - 2);
                    if p.acc[k] < best {
                        best = p.acc[k];
                        onset = p.onset[k];
                    }
                }
                if best.is_finite() {
                    let k = i * rows + (l - 1);
                    cur.acc[k] = best + c;
                    cur.onset[k] = onset;
                }
            }
        }
        let last = rows - 1;
        let mut end: Option<ColumnEnd> = None;
        for l in 1..=rows {
            let acc = cur.acc[last * rows + (l - 1)];
            if !acc.is_finite() {
                continue;
            }
            let normalized = acc / l as f64;
            if end.is_none_or(|e| normalized < e.normalized_cost) {
                end = Some(ColumnEnd {
                    onset: cur.onset[last * rows + (l - 1)],
                    normalized_cost: normalized,
                    length: l,
                });
            }
        }
        ends.push(end);
    }
    ends
}

/// Splits the ring buffer into the slot for column `j` and an accessor for
/// the slot `dt` columns back.
fn split_ring<'a>(
    columns: &'a mut [ExactColumn],
    j: usize,
    ring: usize,
) -> (&'a mut ExactColumn, impl Fn(usize) -> &'a ExactColumn + 'a) {
    let slot = j % ring;
    let (head, tail) = columns.split_at_mut(slot);
    let (cur, after) = tail.split_first_mut().expect("slot in range");
    let head: &'a [ExactColumn] = head;
    let after: &'a [ExactColumn] = after;
    let prev = move |dt: usize| {
        let s = (slot + ring - dt) % ring;
        if s < slot {
            &head[s]
        } else {
            &after[s - slot - 1]
        }
    };
    (cur, prev)
}

/// Recovers the path of an exact-recurrence end by re-running the DP on the
/// window `[onset, column]` with the start pinned to the onset.
fn exact_path(
    cost: &CostMatrix,
    steps: &StepSizes,
    column: usize,
    end: &ColumnEnd,
) -> Vec<(usize, usize)> {
    let rows = cost.rows;
    let width = column - end.onset + 1;
    let idx = |i: usize, w: usize, l: usize| (w * rows + i) * rows + (l - 1);
    let mut acc = vec![f64::INFINITY; width * rows * rows];
    let mut choice = vec![u8::MAX; width * rows * rows];
    acc[idx(0, 0, 1)] = cost.get(0, end.onset);
    for w in 0..width {
        let j = end.onset + w;
        for i in 1..rows {
            let c = cost.get(i, j);
            for l in 2..=i + 1 {
                let mut best = f64::INFINITY;
                let mut pick = u8::MAX;
                for (s, &(dq, dt)) in steps.as_slice().iter().enumerate() {
                    if dq > i || dt > w || l - 1 > i - dq + 1 {
                        continue;
                    }
                    let p = acc[idx(i - dq, w - dt, l - 1)];
                    if p < best {
                        best = p;
                        pick = s as u8;
                    }
                }
                if best.is_finite() {
                    acc[idx(i, w, l)] = best + c;
                    choice[idx(i, w, l)] = pick;
                }
            }
        }
    }
    let (mut i, mut w, mut l) = (rows - 1, width - 1, end.length);
    let mut path = vec![(i, end.onset + w)];
    while i > 0 {
        let (dq, dt) = steps.as_slice()[choice[idx(i, w, l)] as usize];
        i -= dq;
        w -= dt;
        l -= 1;
        path.push((i, end.onset + w));
    }
    path.reverse();
    path
}

/// Greedy recurrence. Returns per-column ends and the chosen step index of
/// every reachable cell (`u8::MAX` for starts and unreachable cells).
fn greedy_ends(cost: &CostMatrix, steps: &StepSizes) -> (Vec<Option<ColumnEnd>>, Vec<u8>) {
    let (rows, cols) = (cost.rows, cost.cols);
    let mut acc = vec![f64::INFINITY; rows * cols];
    let mut len = vec![0usize; rows * cols];
    let mut onset = vec![0usize; rows * cols];
    let mut choice = vec![u8::MAX; rows * cols];
    let at = |i: usize, j: usize| i * cols + j;
    for j in 0..cols {
        acc[at(0, j)] = cost.get(0, j);
        len[at(0, j)] = 1;
        onset[at(0, j)] = j;
        for i in 1..rows {
            let c = cost.get(i, j);
            let mut best = f64::INFINITY;
            let mut pick = None;
            for (s, &(dq, dt)) in steps.as_slice().iter().enumerate() {
                if dq > i || dt > j {
                    continue;
                }
                let p = at(i - dq, j - dt);
                if !acc[p].is_finite() {
                    continue;
                }
                let normalized = (acc[p] + c) / (len[p] + 1) as f64;
                if normalized < best {
                    best = normalized;
                    pick = Some((s, p));
                }
            }
            if let Some((s, p)) = pick {
                let k = at(i, j);
                acc[k] = acc[p] + c;
                len[k] = len[p] + 1;
                onset[k] = onset[p];
                choice[k] = s as u8;
            }
        }
    }
    let ends = (0..cols)
        .map(|j| {
            let k = at(rows - 1, j);
            acc[k].is_finite().then(|| ColumnEnd {
                onset: onset[k],
                normalized_cost: acc[k] / len[k] as f64,
                length: len[k],
            })
        })
        .collect();
    (ends, choice)
}

fn greedy_path(cost: &CostMatrix, steps: &StepSizes, choice: &[u8], column: usize) -> Vec<(usize, usize)> {
    let (mut i, mut j) = (cost.rows - 1, column);
    let mut path = vec![(i, j)];
    while i > 0 {
        let (dq, dt) = steps.as_slice()[choice[i * cost.cols + j] as usize];
        i -= dq;
        j -= dt;
        path.push((i, j));
    }
    path.reverse();
    path
}

/// Per test column, `1 - best normalized cost`; unreachable columns get `-inf`.
pub fn score_curve(result: &WarpResult) -> Vec<f64> {
    scores_from_ends(&result.ends)
}

fn scores_from_ends(ends: &[Option<ColumnEnd>]) -> Vec<f64> {
    ends.iter()
        .map(|e| e.map_or(f64::NEG_INFINITY, |e| 1.0 - e.normalized_cost))
        .collect()
}

/// How per-template score curves of one keyword are merged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Frame-wise maximum; the winning template supplies the onset.
    #[default]
    Max,
    /// Frame-wise mean; the template with the best score supplies the onset.
    Mean,
}

impl FromStr for Aggregation {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(KwsError::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Detection scores of one keyword over one test recording.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordCurve {
    pub keyword: String,
    pub hop_seconds: f64,
    pub scores: Vec<f64>,
    /// Path onset (test frame) behind each score.
    pub onsets: Vec<Option<usize>>,
    /// Index of the template behind each score.
    pub winners: Vec<Option<usize>>,
    /// Frame count of each template.
    pub template_frames: Vec<usize>,
}

impl KeywordCurve {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Length in frames of the template that won frame `j`.
    pub fn template_frames_at(&self, j: usize) -> Option<usize> {
        self.winners[j].map(|w| self.template_frames[w])
    }
}

/// Options shared by every (query, test) alignment of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub steps: StepSizes,
    pub recurrence: Recurrence,
    pub aggregation: Aggregation,
    pub cost_policy: CostPolicy,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: StepSizes::default(),
            recurrence: Recurrence::Exact,
            aggregation: Aggregation::Max,
            cost_policy: CostPolicy::UnitNorm,
        }
    }
}

/// Scores every template of one keyword against a test recording and merges
/// the curves. Templates longer than the recording's minimal footprint
/// contribute nothing; if none fits, every frame scores `-inf`.
pub fn multi_sample_scores(
    queries: &[EmbeddingSequence],
    test: &EmbeddingSequence,
    cfg: &AlignConfig,
) -> Result<KeywordCurve> {
    let first = queries
        .first()
        .ok_or_else(|| KwsError::Parameter("no query templates".into()))?;
    let keyword = first.label().unwrap_or_default().to_string();
    if let Some(q) = queries.iter().find(|q| q.label().unwrap_or_default() != keyword) {
        return Err(KwsError::Parameter(format!(
            "templates mix keywords {keyword:?} and {:?}",
            q.label().unwrap_or_default()
        )));
    }
    let n = test.len();
    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries {
        let cost = cost_matrix_with(q, test, cfg.cost_policy)?;
        match subsequence_ends(&cost, &cfg.steps, cfg.recurrence) {
            Ok(r) => per_query.push(Some(r)),
            Err(KwsError::TooShort(_)) => per_query.push(None),
            Err(e) => return Err(e),
        }
    }
    let mut scores = vec![f64::NEG_INFINITY; n];
    let mut onsets = vec![None; n];
    let mut winners = vec![None; n];
    let curves: Vec<Option<Vec<f64>>> = per_query
        .iter()
        .map(|r| r.as_ref().map(|ends| scores_from_ends(ends)))
        .collect();
    for j in 0..n {
        let mut best = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for (qi, curve) in curves.iter().enumerate() {
            let s = curve.as_ref().map_or(f64::NEG_INFINITY, |c| c[j]);
            sum += s;
            if s > best {
                best = s;
                winners[j] = Some(qi);
            }
        }
        if let Some(w) = winners[j] {
            onsets[j] = per_query[w].as_ref().and_then(|ends| ends[j]).map(|e| e.onset);
        }
        scores[j] = match cfg.aggregation {
            Aggregation::Max => best,
            Aggregation::Mean => sum / queries.len() as f64,
        };
    }
    Ok(KeywordCurve {
        keyword,
        hop_seconds: test.hop_seconds(),
        scores,
        onsets,
        winners,
        template_frames: queries.iter().map(EmbeddingSequence::len).collect(),
    })
}
