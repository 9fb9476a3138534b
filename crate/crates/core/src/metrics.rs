//! Evaluation metrics: time-dependent concordance, the K-sample log-rank
//! test and the adjusted Rand index.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Per-subject survival curves on a shared, non-decreasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePredictions {
    grid: Vec<f64>,
    curves: Vec<Vec<f64>>,
}

impl CurvePredictions {
    pub fn new(grid: Vec<f64>, curves: Vec<Vec<f64>>) -> Result<Self> {
        if grid.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::InvalidArgument("time grid must be non-decreasing".into()));
        }
        for row in &curves {
            if row.len() != grid.len() {
                return Err(Error::Dimension {
                    expected: grid.len(),
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v))
                || row.windows(2).any(|w| w[1] > w[0] + 1e-12)
            {
                return Err(Error::InvalidArgument(
                    "survival curves must be non-increasing within [0, 1]".into(),
                ));
            }
        }
        Ok(Self { grid, curves })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn curves(&self) -> &[Vec<f64>] {
        &self.curves
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Grid index used for evaluation at `t`: the last grid point `<= t`.
    fn grid_index(&self, t: f64) -> Option<usize> {
        self.grid.partition_point(|&g| g <= t).checked_sub(1)
    }

    /// Subject `i`'s curve at `t` by previous-value interpolation; 1 before
    /// the first grid point.
    pub fn survival_at(&self, i: usize, t: f64) -> f64 {
        match self.grid_index(t) {
            Some(g) => self.curves[i][g],
            None => 1.0,
        }
    }
}

/// `{0} ∪ sorted distinct times`, which makes step interpolation exact at
/// every observed time.
pub fn evaluation_grid(times: &[f64]) -> Vec<f64> {
    let mut grid = Vec::with_capacity(times.len() + 1);
    grid.push(0.0);
    grid.extend_from_slice(times);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Time-dependent concordance index.
///
/// A pair (i, j) is comparable when subject i has an observed event and
/// either `t_i < t_j`, or `t_i == t_j` with j censored. It is concordant when
/// `S_i(t_i) < S_j(t_i)`; equal predictions count one half.
pub fn td_c_index(pred: &CurvePredictions, times: &[f64], events: &[bool]) -> Result<f64> {
    let n = times.len();
    if events.len() != n || pred.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: if events.len() != n { events.len() } else { pred.len() },
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    // For each sorted position, the block of equal times it sits in.
    let mut block = vec![(0, n); n];
    let mut p = 0;
    while p < n {
        let mut q = p;
        while q < n && times[order[q]] == times[order[p]] {
            q += 1;
        }
        block[p..q].fill((p, q));
        p = q;
    }

    // Concordance is accumulated in half-pair units so the totals are exact.
    let (halves, comparable) = (0..n)
        .into_par_iter()
        .filter(|&pos| events[order[pos]])
        .map(|pos| {
            let i = order[pos];
            let t = times[i];
            let (start, end) = block[pos];
            let Some(g) = pred.grid_index(t) else {
                // Every curve is 1 before the grid starts: all ties.
                let same_censored = (start..end).filter(|&q| !events[order[q]]).count();
                let later = n - end;
                let c = (later + same_censored) as u64;
                return (c, c);
            };
            let s_i = pred.curves[i][g];
            let mut halves = 0u64;
            let mut comparable = 0u64;
            let mut score = |j: usize| {
                let s_j = pred.curves[j][g];
                comparable += 1;
                if s_i < s_j {
                    halves += 2;
                } else if s_i == s_j {
                    halves += 1;
                }
            };
            for q in start..end {
                if !events[order[q]] {
                    score(order[q]);
                }
            }
            for &j in &order[end..] {
                score(j);
            }
            (halves, comparable)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

    if comparable == 0 {
        return Err(Error::Undefined("no comparable pairs for the concordance index"));
    }
    Ok(halves as f64 / (2 * comparable) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogrankResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Group labels in the order used for `observed` and `expected`.
    pub groups: Vec<usize>,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

/// K-sample log-rank test. `groups[i]` is any label for subject i; groups are
/// compared in ascending label order.
pub fn logrank_test(groups: &[usize], times: &[f64], events: &[bool]) -> Result<LogrankResult> {
    let n = times.len();
    if groups.len() != n || events.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: if groups.len() != n { groups.len() } else { events.len() },
        });
    }
    let labels: Vec<usize> = groups
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let g_count = labels.len();
    if g_count < 2 {
        return Err(Error::Undefined("log-rank needs at least two non-empty groups"));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::Undefined("log-rank needs at least one event"));
    }
    let index: BTreeMap<usize, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let group_of: Vec<usize> = groups.iter().map(|g| index[g]).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut at_risk = vec![0.0f64; g_count];
    for &g in &group_of {
        at_risk[g] += 1.0;
    }
    let mut observed = vec![0.0; g_count];
    let mut expected = vec![0.0; g_count];
    let mut cov = DMatrix::<f64>::zeros(g_count, g_count);
    let mut deaths = vec![0.0; g_count];
    let mut leaving = vec![0.0; g_count];

    let mut p = 0;
    while p < n {
        let t = times[order[p]];
        deaths.fill(0.0);
        leaving.fill(0.0);
        while p < n && times[order[p]] == t {
            let i = order[p];
            if events[i] {
                deaths[group_of[i]] += 1.0;
            }
            leaving[group_of[i]] += 1.0;
            p += 1;
        }
        let d: f64 = deaths.iter().sum();
        if d > 0.0 {
            let total: f64 = at_risk.iter().sum();
            for g in 0..g_count {
                let share = at_risk[g] / total;
                observed[g] += deaths[g];
                expected[g] += d * share;
            }
            if total > 1.0 {
                let factor = d * (total - d) / (total - 1.0);
                for g in 0..g_count {
                    let sg = at_risk[g] / total;
                    for h in 0..g_count {
                        let sh = at_risk[h] / total;
                        let delta = if g == h { 1.0 } else { 0.0 };
                        cov[(g, h)] += factor * sg * (delta - sh);
                    }
                }
            }
        }
        for g in 0..g_count {
            at_risk[g] -= leaving[g];
        }
    }

    // Drop the last group: the full covariance is singular by construction.
    let r = g_count - 1;
    let u = DVector::from_fn(r, |g, _| observed[g] - expected[g]);
    let v = cov.view((0, 0), (r, r)).into_owned();
    let statistic = match v.clone().cholesky() {
        Some(ch) => u.dot(&ch.solve(&u)),
        None => {
            let pinv = v
                .pseudo_inverse(1e-10)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            u.dot(&(pinv * &u))
        }
    }
    .max(0.0);
    let df = r;
    let p_value = ChiSquared::new(df as f64)
        .map(|chi| chi.sf(statistic))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    Ok(LogrankResult {
        statistic,
        df,
        p_value,
        groups: labels,
        observed,
        expected,
    })
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len() as u64;
    if n < 2 {
        return Err(Error::Undefined("adjusted Rand index needs at least two points"));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // Both partitions trivial (all one cluster or all singletons).
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}
