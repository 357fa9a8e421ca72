use serde::Serialize;

use maskmtl::explain::attribute;
use maskmtl::metrics;
use maskmtl::split::iterative_stratified_split;
use maskmtl::synthetic::two_motif_set;
use maskmtl::tokenizer::{tokenize, validate, Vocabulary};
use maskmtl::train::{evaluate, train, EncodedSet, TrainConfig};
use maskmtl::{EncoderConfig, HeadConfig, Model, ModelConfig};

const MAX_LEN: usize = 64;
const HIDDEN: usize = 16;

#[derive(Serialize)]
struct TokenReport {
    tokens: Vec<String>,
    faults: Vec<String>,
}

pub fn tokenize_report(smiles: &str) -> String {
    let faults: Vec<String> = validate(smiles).iter().map(|f| f.to_string()).collect();
    let tokens = tokenize(smiles).map(|s| s.tokens).unwrap_or_default();
    serde_json::to_string(&TokenReport { tokens, faults }).expect("plain data")
}

pub fn auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>, String> {
    if scores.len() != labels.len() {
        return Err(format!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(format!("labels must be 0 or 1, got {bad}"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(format!("scores must be finite, got {bad}"));
    }
    Ok(metrics::roc_auc(scores, labels, &vec![true; scores.len()]))
}

#[derive(Clone, Debug)]
pub struct ToyOptions {
    pub n: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            n: 160,
            lambda: 1e-3,
            epochs: 20,
            seed: 0,
            freeze_backbone: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct Summary {
    tasks: Vec<String>,
    train_rows: usize,
    test_rows: usize,
    epoch_loss: Vec<f64>,
    test_auc: Vec<Option<f64>>,
    mean_mask: f64,
}

/// A small model trained in place on a generated two-task dataset.
pub struct Toy {
    model: Model,
    vocab: Vocabulary,
    summary: Summary,
}

#[derive(Serialize)]
struct TaskWeights {
    task: String,
    probability: f64,
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct Explanation {
    tokens: Vec<String>,
    tasks: Vec<TaskWeights>,
}

impl Toy {
    pub fn train(opts: &ToyOptions) -> Result<Self, String> {
        if !(10..=2000).contains(&opts.n) {
            return Err(format!("n must be between 10 and 2000, got {}", opts.n));
        }
        let set = two_motif_set(opts.n, opts.seed);
        let plan = iterative_stratified_split(&set.labels, 0.2, opts.seed).map_err(|e| e.to_string())?;
        let vocab = Vocabulary::build(plan.train.iter().map(|&r| set.smiles[r].as_str())).map_err(|e| e.to_string())?;
        let data = EncodedSet::new(&vocab, &set.smiles, set.labels.clone(), MAX_LEN).map_err(|e| e.to_string())?;
        let config = ModelConfig {
            encoder: EncoderConfig {
                hidden: HIDDEN,
                n_heads: 2,
                ffn_dim: 2 * HIDDEN,
                max_len: MAX_LEN,
                dropout: 0.0,
                ..EncoderConfig::desk(vocab.len())
            },
            head: HeadConfig::for_hidden(HIDDEN),
            tasks: set.tasks.clone(),
        };
        let cfg = TrainConfig {
            lambda: opts.lambda,
            lr: 3e-3,
            epochs: opts.epochs,
            seed: opts.seed,
            freeze_backbone: opts.freeze_backbone,
            max_len: MAX_LEN,
            ..TrainConfig::default()
        };
        let mut model = Model::new(config, opts.seed).map_err(|e| e.to_string())?;
        let history = train(&mut model, &data, &plan.train, &cfg, |_, _| {}).map_err(|e| e.to_string())?;
        let (metrics, preds) = evaluate(&model, &data, &plan.test, 64).map_err(|e| e.to_string())?;
        let summary = Summary {
            tasks: set.tasks,
            train_rows: plan.train.len(),
            test_rows: plan.test.len(),
            epoch_loss: history.iter().map(|r| r.total).collect(),
            test_auc: metrics.auc,
            mean_mask: preds.mean_mask.iter().sum::<f64>() / preds.mean_mask.len() as f64,
        };
        Ok(Self { model, vocab, summary })
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string(&self.summary).expect("plain data")
    }

    pub fn explain_json(&self, smiles: &str) -> Result<String, String> {
        let seq = tokenize(smiles).map_err(|e| e.to_string())?;
        if seq.len_with_specials() > MAX_LEN {
            return Err(format!("at most {} tokens", MAX_LEN - 2));
        }
        let tasks = (0..self.model.tasks().len())
            .map(|k| {
                attribute(&self.model, &self.vocab, smiles, k, "demo")
                    .map(|r| TaskWeights {
                        task: r.task,
                        probability: r.probability,
                        weights: r.weights,
                    })
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, _>>()?;
        serde_json::to_string(&Explanation {
            tokens: seq.tokens,
            tasks,
        })
        .map_err(|e| e.to_string())
    }
}
