//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use kws_core::dtw::{ColumnEnd, CostMatrix, StepSizes};
use rand::Rng;

/// Every admissible path ending in the last query row at `column`, as cell
/// lists from the first query row onward, together with the step index
/// taken into each cell read from the end.
fn paths_ending_at(cost: &CostMatrix, steps: &StepSizes, column: usize) -> Vec<(Vec<(usize, usize)>, Vec<usize>)> {
    fn walk(
        steps: &[(usize, usize)],
        i: usize,
        j: usize,
        cells: &mut Vec<(usize, usize)>,
        taken: &mut Vec<usize>,
        out: &mut Vec<(Vec<(usize, usize)>, Vec<usize>)>,
    ) {
        cells.push((i, j));
        if i == 0 {
            let mut forward = cells.clone();
            forward.reverse();
            out.push((forward, taken.clone()));
        } else {
            for (s, &(dq, dt)) in steps.iter().enumerate() {
                if dq <= i && dt <= j {
                    taken.push(s);
                    walk(steps, i - dq, j - dt, cells, taken, out);
                    taken.pop();
                }
            }
        }
        cells.pop();
    }
    let mut out = Vec::new();
    walk(steps.as_slice(), cost.rows() - 1, column, &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

/// Minimum path-length-normalized cost per end column by enumeration.
/// Ties go to the shorter path, then to the path whose steps, read from
/// the end, come first in step order.
pub fn brute_force_ends(cost: &CostMatrix, steps: &StepSizes) -> Vec<Option<ColumnEnd>> {
    (0..cost.cols())
        .map(|j| {
            let mut best: Option<(f64, usize, Vec<usize>, usize)> = None;
            for (cells, taken) in paths_ending_at(cost, steps, j) {
                // summed in path order, as a forward recurrence would
                let mut acc = 0.0;
                for &(i, jj) in &cells {
                    acc += cost.get(i, jj);
                }
                let len = cells.len();
                let normalized = acc / len as f64;
                let better = match &best {
                    None => true,
                    Some((c, l, t, _)) => {
                        normalized < *c || (normalized == *c && (len < *l || (len == *l && taken < *t)))
                    }
                };
                if better {
                    best = Some((normalized, len, taken, cells[0].1));
                }
            }
            best.map(|(c, l, _, onset)| ColumnEnd {
                onset,
                normalized_cost: c,
                length: l,
            })
        })
        .collect()
}

/// Greedy recurrence written recursively: each cell keeps the predecessor
/// with the lowest normalized cost after extension, first step on ties.
pub fn greedy_recursive(cost: &CostMatrix, steps: &StepSizes) -> Vec<Option<ColumnEnd>> {
    fn cell(cost: &CostMatrix, steps: &[(usize, usize)], i: usize, j: usize) -> Option<(f64, usize, usize)> {
        if i == 0 {
            return Some((cost.get(0, j), 1, j));
        }
        let c = cost.get(i, j);
        let mut best: Option<(f64, (f64, usize, usize))> = None;
        for &(dq, dt) in steps {
            if dq > i || dt > j {
                continue;
            }
            if let Some((acc, len, onset)) = cell(cost, steps, i - dq, j - dt) {
                let n = (acc + c) / (len + 1) as f64;
                if best.as_ref().is_none_or(|(b, _)| n < *b) {
                    best = Some((n, (acc + c, len + 1, onset)));
                }
            }
        }
        best.map(|(_, v)| v)
    }
    (0..cost.cols())
        .map(|j| {
            cell(cost, steps.as_slice(), cost.rows() - 1, j).map(|(acc, len, onset)| ColumnEnd {
                onset,
                normalized_cost: acc / len as f64,
                length: len,
            })
        })
        .collect()
}

/// Random cost matrix up to `max_rows x max_cols`. Every other draw uses
/// costs on a quarter grid so that exact ties occur.
pub fn random_cost_matrix(rng: &mut impl Rng, max_rows: usize, max_cols: usize, quantized: bool) -> CostMatrix {
    let rows = rng.random_range(1..=max_rows);
    let cols = rng.random_range(1..=max_cols);
    let values = (0..rows * cols)
        .map(|_| {
            if quantized {
                rng.random_range(0..=8) as f64 * 0.25
            } else {
                rng.random_range(0.0..2.0)
            }
        })
        .collect();
    CostMatrix::from_values(rows, cols, values).unwrap()
}

/// Compares two lists of column ends: same reachability and onset, costs
/// within `tol`.
pub fn ends_agree(a: &[Option<ColumnEnd>], b: &[Option<ColumnEnd>], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{} vs {} columns", a.len(), b.len()));
    }
    for (j, (x, y)) in a.iter().zip(b).enumerate() {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if (x.normalized_cost - y.normalized_cost).abs() > tol {
                    return Err(format!("column {j}: cost {} vs {}", x.normalized_cost, y.normalized_cost));
                }
                if x.onset != y.onset {
                    return Err(format!("column {j}: onset {} vs {}", x.onset, y.onset));
                }
            }
            _ => return Err(format!("column {j}: reachability differs ({x:?} vs {y:?})")),
        }
    }
    Ok(())
}
