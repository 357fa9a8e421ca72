//! Composite training objective: per-task masked BCE plus λ times the L1
//! mass of that task's mask, averaged over a fixed task count K.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::TokenBatch;
use crate::labels::LabelMatrix;
use crate::model::Forward;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("regularization strength must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("objective needs at least one task")]
    NoTasks,
    #[error("labeled entry {index} has value {value}, expected 0 or 1")]
    BadLabel { index: usize, value: f64 },
    #[error("batch has {batch} rows but labels have {labels}")]
    RowMismatch { batch: usize, labels: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    /// Divide each sample's mask mass by its valid-token count.
    pub l1_normalize_by_length: bool,
    /// Weight on positive labels inside the BCE term (1 = unweighted).
    pub pos_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            l1_normalize_by_length: false,
            pos_weight: 1.0,
        }
    }
}

/// Values of every term of the objective for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub task_loss: Vec<f64>,
    pub prediction: Vec<f64>,
    pub regularization: Vec<f64>,
    pub lambda: f64,
    pub labeled: Vec<usize>,
}

impl LossReport {
    /// Recomputes the total from the per-task fields.
    pub fn reconstructed_total(&self) -> f64 {
        let k = self.prediction.len() as f64;
        self.prediction
            .iter()
            .zip(&self.regularization)
            .map(|(p, r)| p + self.lambda * r)
            .sum::<f64>()
            / k
    }
}

/// Mean BCE over labeled entries, or `None` when nothing is labeled.
pub fn bce_masked(
    tape: &mut Tape,
    logits: Var,
    labels: &[f64],
    delta: &[bool],
    pos_weight: f64,
) -> Result<Option<Var>, ObjectiveError> {
    let count = delta.iter().filter(|&&d| d).count();
    if count == 0 {
        return Ok(None);
    }
    for (i, (&y, &d)) in labels.iter().zip(delta).enumerate() {
        if d && y != 0.0 && y != 1.0 {
            return Err(ObjectiveError::BadLabel { index: i, value: y });
        }
    }
    let norm = 1.0 / count as f64;
    let weights = labels
        .iter()
        .zip(delta)
        .map(|(&y, &d)| match (d, y == 1.0) {
            (false, _) => 0.0,
            (true, true) => pos_weight * norm,
            (true, false) => norm,
        })
        .collect();
    let targets = labels
        .iter()
        .zip(delta)
        .map(|(&y, &d)| if d { y } else { 0.0 })
        .collect();
    Ok(Some(tape.bce_with_logits(logits, targets, weights)?))
}

/// Mask mass over valid tokens, averaged over labeled samples; `None` when
/// nothing is labeled.
pub fn l1_penalty(
    tape: &mut Tape,
    mask: Var,
    batch: &TokenBatch,
    delta: &[bool],
    normalize_by_length: bool,
) -> Result<Option<Var>, ObjectiveError> {
    if delta.len() != batch.batch {
        return Err(ObjectiveError::RowMismatch {
            batch: batch.batch,
            labels: delta.len(),
        });
    }
    let count = delta.iter().filter(|&&d| d).count();
    if count == 0 {
        return Ok(None);
    }
    let mut weights = vec![0.0; batch.rows()];
    for (n, &d) in delta.iter().enumerate() {
        if !d {
            continue;
        }
        let mut w = 1.0 / count as f64;
        if normalize_by_length {
            w /= batch.valid_count(n).max(1) as f64;
        }
        for l in 0..batch.seq {
            let r = n * batch.seq + l;
            if batch.valid[r] {
                weights[r] = w;
            }
        }
    }
    Ok(Some(tape.weighted_sum(mask, weights)?))
}

/// `L_k = L_pred,k + λ·R_a,k`.
pub fn task_loss(prediction: f64, regularization: f64, lambda: f64) -> Result<f64, ObjectiveError> {
    if !(lambda >= 0.0) {
        return Err(ObjectiveError::NegativeLambda(lambda));
    }
    Ok(prediction + lambda * regularization)
}

/// Arithmetic mean of the per-task losses.
pub fn total_loss(task_losses: &[f64]) -> Result<f64, ObjectiveError> {
    if task_losses.is_empty() {
        return Err(ObjectiveError::NoTasks);
    }
    Ok(task_losses.iter().sum::<f64>() / task_losses.len() as f64)
}

/// Builds the full objective on the tape. Tasks with no labels in the batch
/// contribute zero but still count toward K.
pub fn objective(
    tape: &mut Tape,
    forward: &Forward,
    batch: &TokenBatch,
    labels: &LabelMatrix,
    config: &ObjectiveConfig,
) -> Result<(Var, LossReport), ObjectiveError> {
    if !(config.lambda >= 0.0) {
        return Err(ObjectiveError::NegativeLambda(config.lambda));
    }
    let k = forward.heads.len();
    if k == 0 {
        return Err(ObjectiveError::NoTasks);
    }
    if labels.rows() != batch.batch {
        return Err(ObjectiveError::RowMismatch {
            batch: batch.batch,
            labels: labels.rows(),
        });
    }
    let mut report = LossReport {
        total: 0.0,
        task_loss: Vec::with_capacity(k),
        prediction: Vec::with_capacity(k),
        regularization: Vec::with_capacity(k),
        lambda: config.lambda,
        labeled: Vec::with_capacity(k),
    };
    let mut acc: Option<Var> = None;
    for (task, head) in forward.heads.iter().enumerate() {
        let (y, delta) = labels.column(task);
        report.labeled.push(delta.iter().filter(|&&d| d).count());
        let pred = bce_masked(tape, head.logit, &y, &delta, config.pos_weight)?;
        let reg = l1_penalty(tape, head.mask, batch, &delta, config.l1_normalize_by_length)?;
        let (Some(pred), Some(reg)) = (pred, reg) else {
            report.prediction.push(0.0);
            report.regularization.push(0.0);
            report.task_loss.push(0.0);
            continue;
        };
        let scaled = tape.scale(reg, config.lambda);
        let lk = tape.add(pred, scaled)?;
        report.prediction.push(tape.value(pred).item());
        report.regularization.push(tape.value(reg).item());
        report.task_loss.push(tape.value(lk).item());
        acc = Some(match acc {
            None => lk,
            Some(a) => tape.add(a, lk)?,
        });
    }
    let sum = match acc {
        Some(v) => v,
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    let total = tape.scale(sum, 1.0 / k as f64);
    report.total = tape.value(total).item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(logits: &[f64], y: &[f64], d: &[bool]) -> Option<f64> {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(logits.to_vec()).unwrap());
        bce_masked(&mut tape, l, y, d, 1.0)
            .unwrap()
            .map(|v| tape.value(v).item())
    }

    #[test]
    fn bce_examples() {
        let v = bce(&[0.0], &[1.0], &[true]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        // log(1 + e^-5), unlabeled entry ignored
        let v = bce(&[5.0, -999.0], &[1.0, 0.37], &[true, false]).unwrap();
        assert!((v - 0.006_715_348_489_118_068).abs() < 1e-15, "{v}");
        assert_eq!(bce(&[1.0, 2.0], &[1.0, 0.0], &[false, false]), None);
        let v = bce(&[-1000.0], &[0.0], &[true]).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-300);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(vec![0.0]).unwrap());
        assert!(matches!(
            bce_masked(&mut tape, l, &[0.5], &[true], 1.0),
            Err(ObjectiveError::BadLabel { .. })
        ));
    }

    #[test]
    fn l1_examples() {
        let run = |mask: Vec<f64>, valid: Vec<bool>, batch: usize, seq: usize, delta: &[bool]| {
            let mut tape = Tape::new();
            let m = tape.leaf(Tensor::vector(mask).unwrap());
            let b = TokenBatch::new(vec![0; batch * seq], valid, batch, seq).unwrap();
            l1_penalty(&mut tape, m, &b, delta, false)
                .unwrap()
                .map(|v| tape.value(v).item())
        };
        assert_eq!(run(vec![0.5; 5], vec![true, true, true, true, false], 1, 5, &[true]), Some(2.0));
        assert_eq!(run(vec![0.0; 3], vec![true; 3], 1, 3, &[true]), Some(0.0));
        let mut mask = vec![1.0, 1.0, 1.0, 0.0];
        mask.extend([3.0, 4.0, 0.0, 0.0]);
        assert_eq!(run(mask, vec![true; 8], 2, 4, &[true, false]), Some(3.0));
        assert_eq!(run(vec![0.5; 2], vec![true; 2], 1, 2, &[false]), None);
    }

    #[test]
    fn scalar_combinators() {
        assert_eq!(task_loss(1.0, 2.0, 0.0).unwrap(), 1.0);
        assert!((task_loss(1.0, 2.0, 1e-3).unwrap() - 1.002).abs() < 1e-15);
        assert!(matches!(task_loss(1.0, 2.0, -1.0), Err(ObjectiveError::NegativeLambda(_))));
        assert_eq!(total_loss(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(total_loss(&[0.42]).unwrap(), 0.42);
        assert!((total_loss(&[0.7, 0.0, 1.1]).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(total_loss(&[]), Err(ObjectiveError::NoTasks)));
    }
}
