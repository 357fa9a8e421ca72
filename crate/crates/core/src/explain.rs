//! Per-token mask attributions and a static HTML report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ModelError, TokenBatch};
use crate::model::Model;
use crate::tape::sigmoid_scalar;
use crate::tokenizer::{tokenize, validate, LexFault, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid SMILES {smiles:?}: {}", faults.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidSmiles { smiles: String, faults: Vec<LexFault> },
    #[error("task index {index} out of range for {tasks} tasks")]
    TaskOutOfRange { index: usize, tasks: usize },
    #[error("contrast needs two different tasks, got {0} twice")]
    SameTask(usize),
    #[error("report needs at least one record")]
    NoRecords,
    #[error("top_fraction must be in (0, 1], got {0}")]
    TopFraction(f64),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mask weights of one task over the content tokens of one molecule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub smiles: String,
    pub task: String,
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    /// Weights at the BOS and EOS positions; never highlighted.
    pub bos_weight: f64,
    pub eos_weight: f64,
    pub probability: f64,
    pub fingerprint: String,
}

fn check_task(model: &Model, task: usize) -> Result<(), ExplainError> {
    let tasks = model.tasks().len();
    if task >= tasks {
        return Err(ExplainError::TaskOutOfRange { index: task, tasks });
    }
    Ok(())
}

/// Eval-mode mask and probability for every task at once.
fn attribute_all(
    model: &Model,
    vocab: &Vocabulary,
    smiles: &str,
    fingerprint: &str,
) -> Result<Vec<AttributionRecord>, ExplainError> {
    let faults = validate(smiles);
    if !faults.is_empty() {
        return Err(ExplainError::InvalidSmiles {
            smiles: smiles.to_string(),
            faults,
        });
    }
    let seq = tokenize(smiles).expect("validated");
    let enc = vocab.encode(&seq, seq.len_with_specials())?;
    let batch = TokenBatch::from_rows(&[&enc])?;
    let out = model.infer(&batch)?;
    let n = seq.tokens.len();
    Ok(model
        .tasks()
        .iter()
        .enumerate()
        .map(|(k, name)| AttributionRecord {
            smiles: smiles.to_string(),
            task: name.clone(),
            tokens: seq.tokens.clone(),
            weights: out.masks[k][1..=n].to_vec(),
            bos_weight: out.masks[k][0],
            eos_weight: out.masks[k][n + 1],
            probability: sigmoid_scalar(out.logits[k][0]),
            fingerprint: fingerprint.to_string(),
        })
        .collect())
}

pub fn attribute(
    model: &Model,
    vocab: &Vocabulary,
    smiles: &str,
    task: usize,
    fingerprint: &str,
) -> Result<AttributionRecord, ExplainError> {
    check_task(model, task)?;
    Ok(attribute_all(model, vocab, smiles, fingerprint)?.swap_remove(task))
}

/// Two tasks' attributions on one molecule and their per-token difference
/// (`first − second`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskContrast {
    pub first: AttributionRecord,
    pub second: AttributionRecord,
    pub difference: Vec<f64>,
}

pub fn task_contrast(
    model: &Model,
    vocab: &Vocabulary,
    smiles: &str,
    i: usize,
    j: usize,
    fingerprint: &str,
) -> Result<TaskContrast, ExplainError> {
    if i == j {
        return Err(ExplainError::SameTask(i));
    }
    check_task(model, i)?;
    check_task(model, j)?;
    let all = attribute_all(model, vocab, smiles, fingerprint)?;
    let (first, second) = (all[i].clone(), all[j].clone());
    let difference = first.weights.iter().zip(&second.weights).map(|(a, b)| a - b).collect();
    Ok(TaskContrast {
        first,
        second,
        difference,
    })
}

/// Indices of the `ceil(top_fraction · n)` largest weights, ties broken by
/// position.
pub fn salient_tokens(weights: &[f64], top_fraction: f64) -> Vec<usize> {
    let k = ((top_fraction * weights.len() as f64).ceil() as usize).min(weights.len());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained HTML page, one section per record in input order. Token
/// background intensity is the min-max normalized weight within the
/// molecule; the top `top_fraction` tokens are outlined.
pub fn render_report(records: &[AttributionRecord], top_fraction: f64) -> Result<String, ExplainError> {
    if records.is_empty() {
        return Err(ExplainError::NoRecords);
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(ExplainError::TopFraction(top_fraction));
    }
    let mut html = String::from(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>Token attributions</title>\n<style>\n\
         body { font-family: sans-serif; margin: 2em; }\n\
         .mol { font-family: monospace; font-size: 1.4em; }\n\
         .tok { padding: 0 1px; }\n\
         .salient { outline: 2px solid #900; }\n\
         table { border-collapse: collapse; font-family: monospace; }\n\
         td, th { border: 1px solid #ccc; padding: 2px 6px; text-align: right; }\n\
         .note { color: #666; }\n\
         </style>\n</head>\n<body>\n<h1>Token attributions</h1>\n",
    );
    for (i, r) in records.iter().enumerate() {
        let lo = r.weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let uniform = !(hi > lo);
        let salient = if uniform { Vec::new() } else { salient_tokens(&r.weights, top_fraction) };
        let _ = writeln!(
            html,
            "<section id=\"record-{i}\">\n<h2>{} &middot; {}</h2>\n<p>p = {:.4} &middot; model {}</p>",
            escape(&r.task),
            escape(&r.smiles),
            r.probability,
            escape(&r.fingerprint)
        );
        html.push_str("<p class=\"mol\">");
        for (j, (t, &w)) in r.tokens.iter().zip(&r.weights).enumerate() {
            let alpha = if uniform { 0.0 } else { (w - lo) / (hi - lo) };
            let class = if salient.contains(&j) { "tok salient" } else { "tok" };
            let _ = write!(
                html,
                "<span class=\"{class}\" style=\"background: rgba(220, 0, 0, {alpha:.3})\" title=\"{w:.6}\">{}</span>",
                escape(t)
            );
        }
        html.push_str("</p>\n");
        if uniform {
            html.push_str("<p class=\"note\">All token weights are equal; nothing is highlighted.</p>\n");
        }
        html.push_str("<table>\n<tr><th>#</th><th>token</th><th>weight</th><th>salient</th></tr>\n");
        for (j, (t, w)) in r.tokens.iter().zip(&r.weights).enumerate() {
            let mark = if salient.contains(&j) { "yes" } else { "" };
            let _ = writeln!(html, "<tr><td>{j}</td><td>{}</td><td>{w}</td><td>{mark}</td></tr>", escape(t));
        }
        let _ = writeln!(
            html,
            "</table>\n<p class=\"note\">BOS {} &middot; EOS {}</p>\n</section>",
            r.bos_weight, r.eos_weight
        );
    }
    html.push_str("</body>\n</html>\n");
    Ok(html)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(weights: Vec<f64>) -> AttributionRecord {
        let tokens: Vec<String> = (0..weights.len()).map(|i| format!("T{i}")).collect();
        AttributionRecord {
            smiles: tokens.concat(),
            task: "t".into(),
            tokens,
            weights,
            bos_weight: 0.5,
            eos_weight: 0.5,
            probability: 0.5,
            fingerprint: "f".into(),
        }
    }

    #[test]
    fn salient_selection() {
        assert_eq!(salient_tokens(&[0.9, 0.1, 0.05], 0.15), vec![0]);
        assert_eq!(salient_tokens(&[0.1, 0.9, 0.9, 0.2], 0.5), vec![1, 2]);
        assert_eq!(salient_tokens(&[0.3, 0.2], 1.0), vec![0, 1]);
    }

    #[test]
    fn report_sections_and_highlighting() {
        let html = render_report(&[record(vec![0.9, 0.1, 0.05]), record(vec![0.5; 3])], 0.15).unwrap();
        let first = html.find("record-0").unwrap();
        let second = html.find("record-1").unwrap();
        assert!(first < second);
        assert_eq!(html.matches("tok salient").count(), 1);
        assert_eq!(html.matches("nothing is highlighted").count(), 1);
        assert!(html[second..].contains("rgba(220, 0, 0, 0.000)"));
        assert!(!html[second..].contains("rgba(220, 0, 0, 1.000)"));
        assert!(html[first..second].contains("rgba(220, 0, 0, 1.000)"));
        assert!(html.contains("<td>0.9</td>"));
    }

    #[test]
    fn report_rejects_bad_input() {
        assert!(matches!(render_report(&[], 0.15), Err(ExplainError::NoRecords)));
        assert!(matches!(
            render_report(&[record(vec![0.5])], 0.0),
            Err(ExplainError::TopFraction(_))
        ));
    }

    #[test]
    fn records_survive_json() {
        let r = record(vec![0.25, 0.125]);
        let back: AttributionRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
