//! Mini-batch AdamW training, evaluation helpers and the λ sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ModelError, TokenBatch};
use crate::labels::LabelMatrix;
use crate::metrics::{macro_auc, MetricsError, TaskMetrics, TaskScores};
use crate::model::{Model, ModelConfig};
use crate::objective::{objective, LossReport, ObjectiveConfig, ObjectiveError};
use crate::optim::{adamw_step, AdamWConfig, OptimError, OptimizerState};
use crate::tape::{sigmoid_scalar, Tape};
use crate::tensor::TensorError;
use crate::tokenizer::{tokenize, Encoded, TokenizeError, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("row {row}: {source}")]
    Tokenize { row: usize, source: TokenizeError },
    #[error("row {row}: {source}")]
    Encode { row: usize, source: VocabError },
    #[error("non-finite loss at epoch {epoch}, batch {batch}{}", task_suffix(.task))]
    NonFinite {
        epoch: usize,
        batch: usize,
        task: Option<String>,
    },
    #[error("no rows to train on")]
    Empty,
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
}

fn task_suffix(task: &Option<String>) -> String {
    match task {
        Some(t) => format!(", task {t}"),
        None => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub max_len: usize,
    pub l1_normalize_by_length: bool,
    pub pos_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            lambda: 1e-3,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            freeze_backbone: false,
            max_len: 128,
            l1_normalize_by_length: false,
            pos_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0) {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.max_len < 3 {
            return Err(TrainError::Config("max_len must leave room for BOS and EOS".into()));
        }
        if !(self.pos_weight > 0.0) {
            return Err(TrainError::Config("pos_weight must be positive".into()));
        }
        self.adamw().validate()?;
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            l1_normalize_by_length: self.l1_normalize_by_length,
            pos_weight: self.pos_weight,
        }
    }
}

/// Encoded molecules aligned with their labels.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub rows: Vec<Encoded>,
    pub labels: LabelMatrix,
}

impl EncodedSet {
    pub fn new(
        vocab: &Vocabulary,
        smiles: &[String],
        labels: LabelMatrix,
        max_len: usize,
    ) -> Result<Self, TrainError> {
        let rows = smiles
            .iter()
            .enumerate()
            .map(|(row, s)| {
                let seq = tokenize(s).map_err(|source| TrainError::Tokenize { row, source })?;
                vocab
                    .encode(&seq, max_len)
                    .map_err(|source| TrainError::Encode { row, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(TokenBatch, LabelMatrix), TrainError> {
        for &index in rows {
            if index >= self.rows.len() {
                return Err(TrainError::RowIndex {
                    index,
                    rows: self.rows.len(),
                });
            }
        }
        let encoded: Vec<&Encoded> = rows.iter().map(|&r| &self.rows[r]).collect();
        Ok((TokenBatch::from_rows(&encoded)?, self.labels.select(rows)))
    }
}

/// Trains `model` in place and returns one epoch-mean report per epoch.
/// `on_epoch` sees each report as soon as its epoch ends.
pub fn train(
    model: &mut Model,
    data: &EncodedSet,
    train_rows: &[usize],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>, TrainError> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_rows.is_empty() {
        return Err(TrainError::Empty);
    }
    let adam = config.adamw();
    let obj = config.objective();
    let trainable: Vec<bool> = model
        .params()
        .names()
        .iter()
        .map(|n| !(config.freeze_backbone && n.starts_with("encoder.")))
        .collect();
    let mut state = OptimizerState::new(model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let mut order = train_rows.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut reports = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (batch, labels) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let fwd = model.forward(&mut tape, &bound, &batch, Some(&mut dropout_rng))?;
            let (loss, report) = objective(&mut tape, &fwd, &batch, &labels, &obj)?;
            if !report.total.is_finite() {
                let task = report
                    .task_loss
                    .iter()
                    .position(|v| !v.is_finite())
                    .map(|k| model.tasks()[k].clone());
                return Err(TrainError::NonFinite { epoch, batch: b, task });
            }
            let grads = tape.backward(loss)?;
            let flat: Vec<Vec<f64>> = bound.vars().iter().map(|&v| grads.get(v).into_data()).collect();
            match adamw_step(model.params_mut(), &flat, &mut state, &adam, &trainable) {
                Err(OptimError::NonFiniteGradient { .. }) => {
                    return Err(TrainError::NonFinite { epoch, batch: b, task: None })
                }
                other => other?,
            }
            reports.push(report);
        }
        let mean = mean_report(&reports);
        on_epoch(epoch, &mean);
        history.push(mean);
    }
    Ok(history)
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let k = reports[0].prediction.len();
    let avg = |f: fn(&LossReport) -> &Vec<f64>| -> Vec<f64> {
        (0..k).map(|t| reports.iter().map(|r| f(r)[t]).sum::<f64>() / n).collect()
    };
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        task_loss: avg(|r| &r.task_loss),
        prediction: avg(|r| &r.prediction),
        regularization: avg(|r| &r.regularization),
        lambda: reports[0].lambda,
        labeled: (0..k).map(|t| reports.iter().map(|r| r.labeled[t]).sum()).collect(),
    }
}

/// Eval-mode outputs for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Per task, one probability per row.
    pub probs: Vec<Vec<f64>>,
    /// Mean mask value over valid tokens, per task.
    pub mean_mask: Vec<f64>,
}

pub fn predict(model: &Model, data: &EncodedSet, rows: &[usize], batch_size: usize) -> Result<Predictions, TrainError> {
    let k = model.tasks().len();
    let mut probs = vec![Vec::with_capacity(rows.len()); k];
    let mut mask_sum = vec![0.0; k];
    let mut valid = 0usize;
    for chunk in rows.chunks(batch_size.max(1)) {
        let (batch, _) = data.batch(chunk)?;
        let out = model.infer(&batch)?;
        valid += batch.valid.iter().filter(|&&v| v).count();
        for t in 0..k {
            probs[t].extend(out.logits[t].iter().map(|&z| sigmoid_scalar(z)));
            mask_sum[t] += out.masks[t].iter().sum::<f64>();
        }
    }
    let mean_mask = mask_sum.iter().map(|s| s / valid.max(1) as f64).collect();
    Ok(Predictions { probs, mean_mask })
}

pub fn evaluate(model: &Model, data: &EncodedSet, rows: &[usize], batch_size: usize) -> Result<(TaskMetrics, Predictions), TrainError> {
    let preds = predict(model, data, rows, batch_size)?;
    let labels = data.labels.select(rows);
    let columns: Vec<(Vec<f64>, Vec<bool>)> = (0..labels.tasks()).map(|t| labels.column(t)).collect();
    let tasks: Vec<TaskScores<'_>> = columns
        .iter()
        .zip(&preds.probs)
        .map(|((y, d), s)| TaskScores {
            scores: s,
            labels: y,
            delta: d,
        })
        .collect();
    Ok((macro_auc(&tasks)?, preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub macro_auc: f64,
    pub task_auc: Vec<Option<f64>>,
    pub mean_mask: f64,
    /// Percent change of macro AUC against the λ = 0 row, when there is one.
    pub delta_pct: Option<f64>,
}

/// Trains one fresh model per λ with everything else fixed and scores it
/// on `test_rows`.
pub fn lambda_sweep(
    model_config: &ModelConfig,
    data: &EncodedSet,
    train_rows: &[usize],
    test_rows: &[usize],
    config: &TrainConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>, TrainError> {
    if lambdas.is_empty() {
        return Err(TrainError::Config("λ list is empty".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda,
            ..config.clone()
        };
        let mut model = Model::new(model_config.clone(), cfg.seed)?;
        train(&mut model, data, train_rows, &cfg, |_, _| {})?;
        let (metrics, preds) = evaluate(&model, data, test_rows, cfg.batch_size)?;
        rows.push(SweepRow {
            lambda,
            macro_auc: metrics.macro_auc,
            task_auc: metrics.auc,
            mean_mask: preds.mean_mask.iter().sum::<f64>() / preds.mean_mask.len() as f64,
            delta_pct: None,
        });
    }
    if let Some(base) = rows.iter().find(|r| r.lambda == 0.0).map(|r| r.macro_auc) {
        for r in &mut rows {
            r.delta_pct = Some(100.0 * (r.macro_auc - base) / base);
        }
    }
    Ok(rows)
}
