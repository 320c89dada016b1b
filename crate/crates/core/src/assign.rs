//! Partial linear assignment and the two-stage matcher.
//!
//! A stage takes a similarity matrix (tracks x detections), where a pair is
//! admissible when its similarity is at least the stage threshold. Among all
//! partial matchings of admissible pairs, the Hungarian solver returns one
//! minimizing the summed cost `-similarity`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Hungarian,
    Greedy,
    /// Enumerates every partial matching; only for tiny instances.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationResult {
    /// `(track index, detection index)`, sorted by track index.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Minimum-cost perfect assignment on a square matrix given row-major.
/// Returns the column assigned to each row.
pub fn hungarian_square(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be square");
    // potentials-based O(n^3) formulation, 1-indexed with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimal partial matching: minimizes the summed cost of matched pairs, where
/// `cost[i][j] = None` marks an inadmissible pair and leaving a row or column
/// unmatched costs zero.
pub fn solve_partial(cost: &[Vec<Option<f64>>], cols: usize) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 || cols == 0 {
        return vec![];
    }
    let admissible = cost.iter().flatten().flatten();
    let big = 1.0 + admissible.map(|c| c.abs()).sum::<f64>() * 2.0;
    // rows + cols square: real block, dummy columns for rows, dummy rows for columns
    let n = rows + cols;
    let mut padded = vec![0.0; n * n];
    for (i, row) in cost.iter().enumerate() {
        assert_eq!(row.len(), cols, "ragged cost matrix");
        for (j, c) in row.iter().enumerate() {
            padded[i * n + j] = c.unwrap_or(big);
        }
    }
    let assignment = hungarian_square(n, &padded);
    let mut out: Vec<(usize, usize)> = assignment
        .iter()
        .take(rows)
        .enumerate()
        .filter(|&(i, &j)| j < cols && cost[i][j].is_some())
        .map(|(i, &j)| (i, j))
        .collect();
    out.sort_unstable();
    out
}

/// Greedy matching by ascending cost; ties go to the lower row, then column.
pub fn solve_greedy(cost: &[Vec<Option<f64>>], cols: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = cost
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter_map(move |(j, c)| c.map(|c| (c, i, j))))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; cost.len()];
    let mut col_used = vec![false; cols];
    let mut out = vec![];
    for (_, i, j) in pairs {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Optimal partial matching by enumeration. Exponential; meant as an oracle.
pub fn solve_exhaustive(cost: &[Vec<Option<f64>>], cols: usize) -> Vec<(usize, usize)> {
    fn go(
        cost: &[Vec<Option<f64>>],
        i: usize,
        used: &mut [bool],
        current: &mut Vec<(usize, usize)>,
        acc: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if i == cost.len() {
            if acc < best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        go(cost, i + 1, used, current, acc, best);
        for j in 0..used.len() {
            if let (false, Some(c)) = (used[j], cost[i][j]) {
                used[j] = true;
                current.push((i, j));
                go(cost, i + 1, used, current, acc + c, best);
                current.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, vec![]);
    go(cost, 0, &mut vec![false; cols], &mut vec![], 0.0, &mut best);
    best.1
}

/// One association stage over the listed rows and columns of a similarity
/// matrix. Pairs with similarity below `threshold` (or NaN) are inadmissible.
pub fn assign_stage(
    similarity: &[Vec<f64>],
    rows: &[usize],
    cols: &[usize],
    threshold: f64,
    solver: Solver,
) -> Vec<(usize, usize)> {
    let cost: Vec<Vec<Option<f64>>> = rows
        .iter()
        .map(|&i| {
            cols.iter()
                .map(|&j| {
                    let s = similarity[i][j];
                    (s >= threshold).then_some(-s)
                })
                .collect()
        })
        .collect();
    let local = match solver {
        Solver::Hungarian => solve_partial(&cost, cols.len()),
        Solver::Greedy => solve_greedy(&cost, cols.len()),
        Solver::Exhaustive => solve_exhaustive(&cost, cols.len()),
    };
    local.into_iter().map(|(a, b)| (rows[a], cols[b])).collect()
}

/// Two-stage association. `stage1` and `stage2` hold track x detection
/// similarities (3D and BEV GIoU in the tracker; use `f64::NEG_INFINITY` for
/// pairs that must never match). Stage 2 only sees stage-1 leftovers.
pub fn two_stage(
    stage1: &[Vec<f64>],
    stage2: &[Vec<f64>],
    n_dets: usize,
    thresholds: (f64, f64),
    solver: Solver,
) -> (AssociationResult, Vec<(usize, usize)>) {
    let n_tracks = stage1.len();
    let all_rows: Vec<usize> = (0..n_tracks).collect();
    let all_cols: Vec<usize> = (0..n_dets).collect();
    let first = assign_stage(stage1, &all_rows, &all_cols, thresholds.0, solver);
    let rest_rows: Vec<usize> = all_rows.iter().copied().filter(|i| !first.iter().any(|m| m.0 == *i)).collect();
    let rest_cols: Vec<usize> = all_cols.iter().copied().filter(|j| !first.iter().any(|m| m.1 == *j)).collect();
    let second = assign_stage(stage2, &rest_rows, &rest_cols, thresholds.1, solver);

    let mut matches: Vec<(usize, usize)> = first.iter().chain(&second).copied().collect();
    matches.sort_unstable();
    let unmatched_tracks = rest_rows.into_iter().filter(|i| !second.iter().any(|m| m.0 == *i)).collect();
    let unmatched_detections = rest_cols.into_iter().filter(|j| !second.iter().any(|m| m.1 == *j)).collect();
    (
        AssociationResult {
            matches,
            unmatched_tracks,
            unmatched_detections,
        },
        first,
    )
}
