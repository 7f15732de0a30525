//! Max-score bipartite matching of predictions to ground-truth segments.
//!
//! Rectangular matrices are padded to square with zero-score dummy
//! rows/columns; a row matched to a dummy column is reported unassigned.
//! Among optimal matchings the lexicographically smallest (row by row,
//! real columns before dummies) is returned, so results are reproducible.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Totals closer than this (relative to the optimum) count as ties.
const TIE_TOLERANCE: f64 = 1e-9;

/// Dense `rows × cols` score matrix; rows are predictions, columns are
/// ground-truth segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("score matrix must be non-empty".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "score matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("score matrix has non-finite entries".into()));
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    /// Builds the matrix by calling `f(row, col)` in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn padded(&self) -> (usize, Vec<f64>) {
        let n = self.rows.max(self.cols);
        let mut sq = vec![0.0; n * n];
        for i in 0..self.rows {
            sq[i * n..i * n + self.cols].copy_from_slice(&self.data[i * self.cols..(i + 1) * self.cols]);
        }
        (n, sq)
    }
}

/// Injective map from predictions (rows) to ground truths (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `mapping[i]` is the column matched to row `i`, if any.
    pub mapping: Vec<Option<usize>>,
    /// Sum of the matched scores, accumulated in row order.
    pub total: f64,
}

impl Assignment {
    fn from_padded(perm: &[usize], scores: &ScoreMatrix) -> Self {
        let mapping: Vec<Option<usize>> = perm[..scores.rows]
            .iter()
            .map(|&j| (j < scores.cols).then_some(j))
            .collect();
        let total = mapping
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| scores.get(i, j)))
            .sum();
        Assignment { mapping, total }
    }

    pub fn assigned(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mapping.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j)))
    }

    /// Row matched to ground truth `col`, if any.
    pub fn row_for(&self, col: usize) -> Option<usize> {
        self.mapping.iter().position(|&j| j == Some(col))
    }
}

/// Maximum-weight perfect matching on a square matrix (shortest augmenting
/// path Hungarian method, O(n³)). Returns the row→column permutation and
/// its value.
fn hungarian_max(n: usize, score: &[f64]) -> (Vec<usize>, f64) {
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let cost = |i: usize, j: usize| -score[i * n + j];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let value = perm.iter().enumerate().map(|(i, &j)| score[i * n + j]).sum();
    (perm, value)
}

/// Best value over rows `from..` and the columns not in `taken`.
fn completion_value(n: usize, sq: &[f64], from: usize, taken: &[bool]) -> f64 {
    let free: Vec<usize> = (0..n).filter(|&j| !taken[j]).collect();
    let m = n - from;
    debug_assert_eq!(free.len(), m);
    let mut sub = Vec::with_capacity(m * m);
    for i in from..n {
        sub.extend(free.iter().map(|&j| sq[i * n + j]));
    }
    hungarian_max(m, &sub).1
}

fn ties(value: f64, best: f64) -> bool {
    value >= best - TIE_TOLERANCE * best.abs().max(1.0)
}

/// Optimal assignment maximising the summed score.
pub fn max_matching(scores: &ScoreMatrix) -> Assignment {
    let (n, sq) = scores.padded();
    let (perm, best) = hungarian_max(n, &sq);
    // Fix rows in order to the smallest column that still admits an
    // optimal completion.
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; n];
    let mut fixed = 0.0;
    for i in 0..n {
        let mut pick = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            // Dummy columns are interchangeable: only the first free one matters.
            if j >= scores.cols && (scores.cols..j).any(|d| !taken[d]) {
                continue;
            }
            taken[j] = true;
            let value = fixed + sq[i * n + j] + completion_value(n, &sq, i + 1, &taken);
            taken[j] = false;
            if ties(value, best) {
                pick = Some(j);
                break;
            }
        }
        // Numerical fallback: keep the Hungarian choice.
        let j = pick.unwrap_or_else(|| perm[i]);
        taken[j] = true;
        fixed += sq[i * n + j];
        chosen.push(j);
    }
    Assignment::from_padded(&chosen, scores)
}

/// `max_matching` on `U + ε` with `ε` i.i.d. `N(0, sigma²)`. The reported
/// total uses the unperturbed scores.
pub fn perturbed_matching(scores: &ScoreMatrix, sigma: f64, rng: &mut impl Rng) -> Assignment {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return max_matching(scores);
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let noisy: Vec<f64> = scores.data.iter().map(|&u| u + normal.sample(rng)).collect();
    let noisy = ScoreMatrix::new(scores.rows, scores.cols, noisy).expect("same shape");
    let perm = max_matching(&noisy);
    let total = perm
        .assigned()
        .map(|(i, j)| scores.get(i, j))
        .sum();
    Assignment {
        mapping: perm.mapping,
        total,
    }
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive search with the same tie-break as [`max_matching`].
/// Refuses problems with `min(rows, cols) > 8`.
pub fn brute_force_matching(scores: &ScoreMatrix) -> Result<Assignment> {
    if scores.rows.min(scores.cols) > BRUTE_FORCE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to min(rows, cols) <= {BRUTE_FORCE_LIMIT}"
        )));
    }
    let (n, sq) = scores.padded();
    let mut all = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut taken = vec![false; n];
    enumerate(n, scores.cols, &sq, &mut current, &mut taken, 0.0, &mut all);
    let best = all.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    // Enumeration is in lexicographic order, so the first tie wins.
    let (perm, _) = all
        .into_iter()
        .find(|(_, v)| ties(*v, best))
        .expect("at least one permutation");
    Ok(Assignment::from_padded(&perm, scores))
}

fn enumerate(
    n: usize,
    real_cols: usize,
    sq: &[f64],
    current: &mut Vec<usize>,
    taken: &mut [bool],
    value: f64,
    out: &mut Vec<(Vec<usize>, f64)>,
) {
    let i = current.len();
    if i == n {
        out.push((current.clone(), value));
        return;
    }
    for j in 0..n {
        if taken[j] || (j >= real_cols && (real_cols..j).any(|d| !taken[d])) {
            continue;
        }
        taken[j] = true;
        current.push(j);
        enumerate(n, real_cols, sq, current, taken, value + sq[i * n + j], out);
        current.pop();
        taken[j] = false;
    }
}
