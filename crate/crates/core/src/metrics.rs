//! ROC-AUC via the Mann–Whitney rank statistic, and its macro average.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no task has both positive and negative labels")]
    AllUndefined,
    #[error("macro AUC needs at least one task")]
    NoTasks,
    #[error("scores ({scores}), labels ({labels}) and flags ({delta}) differ in length")]
    Length {
        scores: usize,
        labels: usize,
        delta: usize,
    },
}

/// Twice the Mann–Whitney U statistic (ties count one, wins two) together
/// with the positive and negative counts.
fn doubled_u(scores: &[f64], labels: &[f64], delta: &[bool]) -> (u128, u64, u64) {
    let mut entries: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .zip(delta)
        .filter(|(_, &d)| d)
        .map(|((&s, &y), _)| (s, y == 1.0))
        .collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut negatives_below: u64 = 0;
    let mut doubled: u128 = 0;
    let (mut pos, mut neg) = (0u64, 0u64);
    let mut i = 0;
    while i < entries.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < entries.len() && entries[j].0 == entries[i].0 {
            if entries[j].1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        doubled += u128::from(p) * u128::from(2 * negatives_below + q);
        negatives_below += q;
        pos += p;
        neg += q;
        i = j;
    }
    (doubled, pos, neg)
}

/// Area under the ROC curve over labeled entries, with ties worth half a
/// pair. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[f64], delta: &[bool]) -> Option<f64> {
    assert!(
        scores.len() == labels.len() && labels.len() == delta.len(),
        "roc_auc: length mismatch"
    );
    let (doubled, pos, neg) = doubled_u(scores, labels, delta);
    if pos == 0 || neg == 0 {
        return None;
    }
    Some(doubled as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Per-task scores, labels and presence flags.
#[derive(Clone, Debug)]
pub struct TaskScores<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [f64],
    pub delta: &'a [bool],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub auc: Vec<Option<f64>>,
    pub labeled: Vec<usize>,
    pub positives: Vec<usize>,
    pub macro_auc: f64,
    /// Tasks left out of the macro average for lack of one class.
    pub skipped: usize,
}

/// Mean of the defined per-task AUCs.
pub fn macro_auc(tasks: &[TaskScores<'_>]) -> Result<TaskMetrics, MetricsError> {
    if tasks.is_empty() {
        return Err(MetricsError::NoTasks);
    }
    let mut out = TaskMetrics {
        auc: Vec::with_capacity(tasks.len()),
        labeled: Vec::with_capacity(tasks.len()),
        positives: Vec::with_capacity(tasks.len()),
        macro_auc: 0.0,
        skipped: 0,
    };
    for t in tasks {
        if t.scores.len() != t.labels.len() || t.labels.len() != t.delta.len() {
            return Err(MetricsError::Length {
                scores: t.scores.len(),
                labels: t.labels.len(),
                delta: t.delta.len(),
            });
        }
        out.auc.push(roc_auc(t.scores, t.labels, t.delta));
        out.labeled.push(t.delta.iter().filter(|&&d| d).count());
        out.positives.push(
            t.labels
                .iter()
                .zip(t.delta)
                .filter(|(&y, &d)| d && y == 1.0)
                .count(),
        );
    }
    let defined: Vec<f64> = out.auc.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined);
    }
    out.skipped = tasks.len() - defined.len();
    out.macro_auc = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
        roc_auc(scores, labels, &vec![true; scores.len()])
    }

    #[test]
    fn hand_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.9], &[1.0, 0.0]), Some(0.0));
        assert_eq!(auc(&[0.8, 0.7, 0.6, 0.2], &[1.0, 0.0, 1.0, 0.0]), Some(0.75));
        assert_eq!(auc(&[0.3; 5], &[1.0, 0.0, 1.0, 0.0, 0.0]), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &[1.0, 1.0]), None);
    }

    #[test]
    fn unlabeled_entries_are_ignored() {
        let a = roc_auc(&[0.9, 0.0, 0.1], &[1.0, 1.0, 0.0], &[true, false, true]);
        assert_eq!(a, Some(1.0));
    }

    #[test]
    fn macro_examples() {
        let yes = [true; 2];
        let m = macro_auc(&[
            TaskScores { scores: &[0.9, 0.1], labels: &[1.0, 0.0], delta: &yes },
            TaskScores { scores: &[0.1, 0.9], labels: &[1.0, 0.0], delta: &yes },
        ])
        .unwrap();
        assert_eq!(m.macro_auc, 0.5);
        let m = macro_auc(&[
            TaskScores { scores: &[0.9, 0.1], labels: &[1.0, 0.0], delta: &yes },
            TaskScores { scores: &[0.1, 0.9], labels: &[1.0, 1.0], delta: &yes },
        ])
        .unwrap();
        assert_eq!((m.macro_auc, m.skipped), (1.0, 1));
        assert_eq!(m.auc[1], None);
        assert!(matches!(
            macro_auc(&[TaskScores { scores: &[0.1], labels: &[1.0], delta: &[true] }]),
            Err(MetricsError::AllUndefined)
        ));
        assert!(matches!(macro_auc(&[]), Err(MetricsError::NoTasks)));
    }
}
