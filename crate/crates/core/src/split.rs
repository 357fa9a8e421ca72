//! Iterative stratification for multi-label data with missing labels.
//!
//! Strata are `(task, value)` pairs over labeled cells. The rarest stratum
//! with unassigned rows is processed first; each of its rows goes to the
//! subset with the largest unmet demand for that stratum, ties broken by the
//! larger overall remaining demand and then by a seeded coin. A subset that
//! has reached its requested size receives no further rows, so subset sizes
//! are exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::LabelMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("need at least {needed} rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("test fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("fold count must be at least 2, got {0}")]
    BadFolds(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Fold index of every row, for plans derived from k-fold assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Vec<usize>>,
}

/// Candidates attaining the maximum of `key`.
fn argmax_all(candidates: &[usize], key: impl Fn(usize) -> f64) -> Vec<usize> {
    let best = candidates
        .iter()
        .map(|&j| key(j))
        .fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .copied()
        .filter(|&j| key(j) == best)
        .collect()
}

/// Assigns every row to one of `sizes.len()` subsets with exactly
/// `sizes[j]` rows each.
pub fn stratify(labels: &LabelMatrix, sizes: &[usize], seed: u64) -> Vec<usize> {
    let n = labels.rows();
    let k = labels.tasks();
    assert_eq!(sizes.iter().sum::<usize>(), n, "subset sizes must cover all rows");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets = sizes.len();
    let fractions: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();

    let stratum_of = |r: usize, t: usize| -> Option<usize> {
        labels
            .labeled(r, t)
            .then(|| 2 * t + usize::from(labels.y(r, t) == 1.0))
    };
    let strata = 2 * k;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); strata];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &r in &order {
        for t in 0..k {
            if let Some(s) = stratum_of(r, t) {
                members[s].push(r);
            }
        }
    }
    let mut demand: Vec<Vec<f64>> = (0..subsets)
        .map(|j| members.iter().map(|m| m.len() as f64 * fractions[j]).collect())
        .collect();
    let mut remaining_total: Vec<i64> = sizes.iter().map(|&s| s as i64).collect();
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut left: Vec<usize> = members.iter().map(Vec::len).collect();

    loop {
        let Some(stratum) = (0..strata)
            .filter(|&s| left[s] > 0)
            .min_by_key(|&s| (left[s], s))
        else {
            break;
        };
        for idx in 0..members[stratum].len() {
            let r = members[stratum][idx];
            if assigned[r].is_some() {
                continue;
            }
            let open: Vec<usize> = (0..subsets).filter(|&j| remaining_total[j] > 0).collect();
            let tied = argmax_all(&open, |j| demand[j][stratum]);
            let tied = if tied.len() > 1 {
                argmax_all(&tied, |j| remaining_total[j] as f64)
            } else {
                tied
            };
            let chosen = if tied.len() > 1 {
                tied[rng.random_range(0..tied.len())]
            } else {
                tied[0]
            };
            assigned[r] = Some(chosen);
            remaining_total[chosen] -= 1;
            for t in 0..k {
                if let Some(s) = stratum_of(r, t) {
                    demand[chosen][s] -= 1.0;
                    left[s] -= 1;
                }
            }
        }
    }

    // Rows without any label fill the remaining capacity.
    for &r in &order {
        if assigned[r].is_some() {
            continue;
        }
        let open: Vec<usize> = (0..subsets).filter(|&j| remaining_total[j] > 0).collect();
        let tied = argmax_all(&open, |j| remaining_total[j] as f64);
        let chosen = tied[rng.random_range(0..tied.len())];
        assigned[r] = Some(chosen);
        remaining_total[chosen] -= 1;
    }
    assigned.into_iter().map(|a| a.expect("every row assigned")).collect()
}

const RESTARTS: usize = 16;

/// Train/test split with `round(test_fraction·N)` test rows (at least one
/// row on each side).
pub fn iterative_stratified_split(
    labels: &LabelMatrix,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitPlan, SplitError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(SplitError::BadFraction(test_fraction));
    }
    let n = labels.rows();
    if n < 2 {
        return Err(SplitError::TooFewRows { rows: n, needed: 2 });
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let sizes = [n - n_test, n_test];
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = Vec::new();
    let mut best_score = (f64::INFINITY, f64::INFINITY);
    for _ in 0..RESTARTS {
        let mut candidate = stratify(labels, &sizes, seeds.random());
        let score = refine_by_swaps(labels, &mut candidate);
        if score < best_score {
            best_score = score;
            assignment = candidate;
        }
    }
    let mut plan = SplitPlan {
        train: Vec::with_capacity(n - n_test),
        test: Vec::with_capacity(n_test),
        folds: None,
    };
    for (r, &s) in assignment.iter().enumerate() {
        if s == 0 {
            plan.train.push(r);
        } else {
            plan.test.push(r);
        }
    }
    Ok(plan)
}

/// `k` stratified folds; plan `i` validates on fold `i`.
pub fn kfold(labels: &LabelMatrix, k: usize, seed: u64) -> Result<Vec<SplitPlan>, SplitError> {
    if k < 2 {
        return Err(SplitError::BadFolds(k));
    }
    let n = labels.rows();
    if n < k {
        return Err(SplitError::TooFewRows { rows: n, needed: k });
    }
    let sizes: Vec<usize> = (0..k).map(|i| n / k + usize::from(i < n % k)).collect();
    let folds = stratify(labels, &sizes, seed);
    Ok((0..k)
        .map(|i| SplitPlan {
            train: (0..n).filter(|&r| folds[r] != i).collect(),
            test: (0..n).filter(|&r| folds[r] == i).collect(),
            folds: Some(folds.clone()),
        })
        .collect())
}

/// Labeled and positive counts per task for subset 0 and subset 1.
fn side_counts(labels: &LabelMatrix, assignment: &[usize]) -> Vec<[[i64; 2]; 2]> {
    let mut counts = vec![[[0i64; 2]; 2]; labels.tasks()];
    for (r, &side) in assignment.iter().enumerate() {
        for (t, c) in counts.iter_mut().enumerate() {
            if labels.labeled(r, t) {
                c[side][0] += 1;
                c[side][1] += i64::from(labels.y(r, t) == 1.0);
            }
        }
    }
    counts
}

/// (largest gap, summed gap) over tasks; a task with one side unlabeled
/// counts as a gap of 1.
fn gap_score(counts: &[[[i64; 2]; 2]]) -> (f64, f64) {
    let mut worst: f64 = 0.0;
    let mut total = 0.0;
    for c in counts {
        let gap = if c[0][0] == 0 || c[1][0] == 0 {
            1.0
        } else {
            (c[0][1] as f64 / c[0][0] as f64 - c[1][1] as f64 / c[1][0] as f64).abs()
        };
        worst = worst.max(gap);
        total += gap;
    }
    (worst, total)
}

fn exchange(
    labels: &LabelMatrix,
    counts: &[[[i64; 2]; 2]],
    to_test: &[usize],
    to_train: &[usize],
) -> Vec<[[i64; 2]; 2]> {
    let mut trial = counts.to_vec();
    for (t, c) in trial.iter_mut().enumerate() {
        for (&r, sign) in to_test.iter().map(|r| (r, 1)).chain(to_train.iter().map(|r| (r, -1))) {
            if labels.labeled(r, t) {
                let pos = i64::from(labels.y(r, t) == 1.0);
                c[0][0] -= sign;
                c[0][1] -= sign * pos;
                c[1][0] += sign;
                c[1][1] += sign * pos;
            }
        }
    }
    trial
}

fn improves(candidate: (f64, f64), current: (f64, f64)) -> bool {
    candidate.0 < current.0 - 1e-12
        || (candidate.0 <= current.0 + 1e-12 && candidate.1 < current.1 - 1e-12)
}

// Largest k-for-k exchange neighbourhood searched for k ≥ 2.
const EXCHANGE_LIMIT: f64 = 250_000.0;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Calls `f` with every k-subset of `items`, in lexicographic order.
fn for_each_subset(items: &[usize], k: usize, f: &mut impl FnMut(&[usize])) {
    if k > items.len() {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut chosen = vec![0; k];
    loop {
        for (c, &i) in chosen.iter_mut().zip(&idx) {
            *c = items[i];
        }
        f(&chosen);
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < items.len() - k + p) else {
            return;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

/// Best-improvement exchanges between train and test. Single swaps are
/// always tried; larger k-for-k exchanges only when nothing smaller helps
/// and the neighbourhood has at most `EXCHANGE_LIMIT` moves. Stops when no
/// exchange lowers the (largest gap, summed gap) score, which it returns.
fn refine_by_swaps(labels: &LabelMatrix, assignment: &mut [usize]) -> (f64, f64) {
    let mut counts = side_counts(labels, assignment);
    let mut score = gap_score(&counts);
    loop {
        let train: Vec<usize> = (0..assignment.len()).filter(|&r| assignment[r] == 0).collect();
        let test: Vec<usize> = (0..assignment.len()).filter(|&r| assignment[r] == 1).collect();
        let mut best: Option<((f64, f64), Vec<usize>, Vec<usize>)> = None;
        for k in 1..=train.len().min(test.len()) {
            if k > 1 && binomial(train.len(), k) * binomial(test.len(), k) > EXCHANGE_LIMIT {
                break;
            }
            for_each_subset(&train, k, &mut |a| {
                for_each_subset(&test, k, &mut |b| {
                    let s = gap_score(&exchange(labels, &counts, a, b));
                    let beats_best = best.as_ref().map_or(true, |(bs, _, _)| s < *bs);
                    if improves(s, score) && beats_best {
                        best = Some((s, a.to_vec(), b.to_vec()));
                    }
                });
            });
            if best.is_some() {
                break;
            }
        }
        let Some((s, a, b)) = best else { return score };
        for r in a {
            assignment[r] = 1;
        }
        for r in b {
            assignment[r] = 0;
        }
        counts = side_counts(labels, assignment);
        score = s;
    }
}

/// `|pos-rate(train) − pos-rate(test)|` per task; `None` when either side
/// has no labeled rows for the task.
pub fn positive_rate_gaps(labels: &LabelMatrix, plan: &SplitPlan) -> Vec<Option<f64>> {
    let rate = |rows: &[usize], t: usize| -> Option<f64> {
        let labeled: Vec<usize> = rows.iter().copied().filter(|&r| labels.labeled(r, t)).collect();
        if labeled.is_empty() {
            return None;
        }
        let pos = labeled.iter().filter(|&&r| labels.y(r, t) == 1.0).count();
        Some(pos as f64 / labeled.len() as f64)
    };
    (0..labels.tasks())
        .map(|t| Some((rate(&plan.train, t)? - rate(&plan.test, t)?).abs()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_enumerated_once_each() {
        let mut seen = Vec::new();
        for_each_subset(&[3, 5, 7, 9], 2, &mut |c| seen.push(c.to_vec()));
        assert_eq!(seen, vec![vec![3, 5], vec![3, 7], vec![3, 9], vec![5, 7], vec![5, 9], vec![7, 9]]);
        let mut n = 0;
        for_each_subset(&[1, 2], 3, &mut |_| n += 1);
        assert_eq!(n, 0);
        assert_eq!(binomial(6, 3), 20.0);
    }

    fn single_task(y: &[f64]) -> LabelMatrix {
        LabelMatrix::new(y.len(), 1, y.to_vec(), vec![true; y.len()]).unwrap()
    }

    #[test]
    fn balanced_ten_rows() {
        let labels = single_task(&[1., 1., 1., 1., 1., 0., 0., 0., 0., 0.]);
        for seed in 0..20 {
            let plan = iterative_stratified_split(&labels, 0.2, seed).unwrap();
            assert_eq!(plan.test.len(), 2);
            let pos = plan.test.iter().filter(|&&r| r < 5).count();
            assert_eq!(pos, 1, "seed {seed}: {plan:?}");
        }
    }

    #[test]
    fn unlabeled_rows_fall_back_to_random_sizes() {
        let labels = LabelMatrix::new(10, 2, vec![0.0; 20], vec![false; 20]).unwrap();
        let a = iterative_stratified_split(&labels, 0.3, 4).unwrap();
        let b = iterative_stratified_split(&labels, 0.3, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (7, 3));
    }

    #[test]
    fn errors() {
        let labels = single_task(&[1.0]);
        assert_eq!(
            iterative_stratified_split(&labels, 0.2, 0),
            Err(SplitError::TooFewRows { rows: 1, needed: 2 })
        );
        let labels = single_task(&[1.0, 0.0]);
        assert_eq!(
            iterative_stratified_split(&labels, 1.0, 0),
            Err(SplitError::BadFraction(1.0))
        );
        assert_eq!(kfold(&labels, 3, 0), Err(SplitError::TooFewRows { rows: 2, needed: 3 }));
        assert_eq!(kfold(&labels, 1, 0), Err(SplitError::BadFolds(1)));
    }

    #[test]
    fn kfold_partitions() {
        let labels = single_task(&[1., 0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        let plans = kfold(&labels, 5, 9).unwrap();
        let mut seen = vec![0; 10];
        for p in &plans {
            assert_eq!(p.test.len(), 2);
            assert_eq!(p.train.len(), 8);
            for &r in &p.test {
                seen[r] += 1;
            }
            let pos = p.test.iter().filter(|&&r| r % 2 == 0).count();
            assert_eq!(pos, 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}
