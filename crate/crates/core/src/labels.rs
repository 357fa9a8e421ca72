use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("label matrix expects {expected} entries, got {actual}")]
    Size { expected: usize, actual: usize },
    #[error("row {row}, task {task}: labeled value {value} is not 0 or 1")]
    NotBinary { row: usize, task: usize, value: f64 },
}

/// Row-major `[rows × tasks]` labels with presence flags. Where a label is
/// absent its value is a placeholder and never read by losses or metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    rows: usize,
    tasks: usize,
    y: Vec<f64>,
    delta: Vec<bool>,
}

impl LabelMatrix {
    pub fn new(rows: usize, tasks: usize, y: Vec<f64>, delta: Vec<bool>) -> Result<Self, LabelError> {
        let expected = rows * tasks;
        for actual in [y.len(), delta.len()] {
            if actual != expected {
                return Err(LabelError::Size { expected, actual });
            }
        }
        for (i, (&v, &d)) in y.iter().zip(&delta).enumerate() {
            if d && v != 0.0 && v != 1.0 {
                return Err(LabelError::NotBinary {
                    row: i / tasks,
                    task: i % tasks,
                    value: v,
                });
            }
        }
        Ok(Self {
            rows,
            tasks,
            y,
            delta,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn y(&self, row: usize, task: usize) -> f64 {
        self.y[row * self.tasks + task]
    }

    pub fn labeled(&self, row: usize, task: usize) -> bool {
        self.delta[row * self.tasks + task]
    }

    /// Labels and presence flags of one task.
    pub fn column(&self, task: usize) -> (Vec<f64>, Vec<bool>) {
        (0..self.rows)
            .map(|r| (self.y(r, task), self.labeled(r, task)))
            .unzip()
    }

    /// Sub-matrix of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut y = Vec::with_capacity(rows.len() * self.tasks);
        let mut delta = Vec::with_capacity(rows.len() * self.tasks);
        for &r in rows {
            y.extend_from_slice(&self.y[r * self.tasks..(r + 1) * self.tasks]);
            delta.extend_from_slice(&self.delta[r * self.tasks..(r + 1) * self.tasks]);
        }
        Self {
            rows: rows.len(),
            tasks: self.tasks,
            y,
            delta,
        }
    }

    /// Copy with one task column only.
    pub fn task_only(&self, task: usize) -> Self {
        let (y, delta) = self.column(task);
        Self {
            rows: self.rows,
            tasks: 1,
            y,
            delta,
        }
    }

    pub fn labeled_count(&self, task: usize) -> usize {
        (0..self.rows).filter(|&r| self.labeled(r, task)).count()
    }

    pub fn positive_count(&self, task: usize) -> usize {
        (0..self.rows)
            .filter(|&r| self.labeled(r, task) && self.y(r, task) == 1.0)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_unchecked() {
        let m = LabelMatrix::new(2, 2, vec![1.0, 0.7, 0.0, 1.0], vec![true, false, true, true]).unwrap();
        assert_eq!(m.column(1), (vec![0.7, 1.0], vec![false, true]));
        assert_eq!(m.select(&[1]).column(0), (vec![0.0], vec![true]));
        assert!(matches!(
            LabelMatrix::new(1, 1, vec![2.0], vec![true]),
            Err(LabelError::NotBinary { row: 0, task: 0, .. })
        ));
    }
}
