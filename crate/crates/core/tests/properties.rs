use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskmtl::gradcheck::grad_check;
use maskmtl::metrics::roc_auc;
use maskmtl::objective::{objective, ObjectiveConfig};
use maskmtl::optim::{adamw_step, AdamWConfig, OptimizerState};
use maskmtl::params::ParamSet;
use maskmtl::tokenizer::{tokenize, Vocabulary, BOS, EOS, PAD};
use maskmtl::{EncoderConfig, HeadConfig, LabelMatrix, Model, ModelConfig, Tape, Tensor, TensorError, TokenBatch, Var};

fn random(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element carries gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(out, w)
}

fn check_op<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = make(&mut rng);
        let f = |tape: &mut Tape, vars: &[Var]| {
            let out = op(tape, vars)?;
            project(tape, out, seed + 1000)
        };
        let r = grad_check(f, &params, 1e-5).unwrap();
        // tiny gradients sit at the level of the O(h^2) truncation error
        let close = r.max_relative_error < 1e-6 || (r.analytic - r.numeric).abs() < 1e-10;
        assert!(close, "{name} seed {seed}: {r:?}");
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    check_op("matmul", |r| vec![random(r, &[3, 4], 1.0), random(r, &[4, 2], 1.0)], |t, v| t.matmul(v[0], v[1]));
    check_op("add_row", |r| vec![random(r, &[3, 4], 1.0), random(r, &[4], 1.0)], |t, v| t.add_row(v[0], v[1]));
    check_op("mul", |r| vec![random(r, &[3, 4], 1.0), random(r, &[3, 4], 1.0)], |t, v| t.mul(v[0], v[1]));
    check_op("gelu", |r| vec![random(r, &[5, 3], 3.0)], |t, v| Ok(t.gelu(v[0])));
    check_op("sigmoid", |r| vec![random(r, &[5, 3], 4.0)], |t, v| Ok(t.sigmoid(v[0])));
    check_op(
        "layer_norm",
        |r| vec![random(r, &[4, 6], 2.0), random(r, &[6], 1.5), random(r, &[6], 1.0)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check_op(
        "gather_rows",
        |r| vec![random(r, &[5, 3], 1.0)],
        |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]),
    );
    let valid = [true, true, false, true, true, true];
    check_op(
        "attention",
        |r| vec![random(r, &[6, 4], 1.0), random(r, &[6, 4], 1.0), random(r, &[6, 4], 1.0)],
        |t, v| t.attention(v[0], v[1], v[2], 2, 3, 2, &valid),
    );
    check_op(
        "scale_rows",
        |r| vec![random(r, &[4, 3], 1.0), random(r, &[4], 1.0)],
        |t, v| t.scale_rows(v[0], v[1]),
    );
    let valid = [true, false, true, true, true, false];
    check_op(
        "segment_sum",
        |r| vec![random(r, &[6, 3], 1.0)],
        |t, v| t.segment_sum(v[0], 2, &valid),
    );
    check_op(
        "div_rows",
        |r| {
            let mut den = random(r, &[3], 1.0);
            den.data_mut().iter_mut().for_each(|d| *d = d.abs() + 0.5);
            vec![random(r, &[3, 2], 1.0), den]
        },
        |t, v| t.div_rows(v[0], v[1]),
    );
    check_op(
        "bce_with_logits",
        |r| vec![random(r, &[6], 5.0)],
        |t, v| t.bce_with_logits(v[0], vec![1.0, 0.0, 1.0, 0.0, 0.5, 1.0], vec![1.0, 1.0, 0.0, 2.0, 1.0, 0.5]),
    );
}

fn small_config(vocab: usize, tasks: usize) -> ModelConfig {
    let encoder = EncoderConfig {
        hidden: 8,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 32,
        ..EncoderConfig::desk(vocab)
    };
    ModelConfig {
        encoder,
        head: HeadConfig::for_hidden(8),
        tasks: (0..tasks).map(|k| format!("t{k}")).collect(),
    }
}

fn batch_for(vocab: &Vocabulary, smiles: &[&str]) -> TokenBatch {
    let enc: Vec<_> = smiles
        .iter()
        .map(|s| vocab.encode(&tokenize(s).unwrap(), 32).unwrap())
        .collect();
    TokenBatch::from_rows(&enc.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn heads_do_not_see_each_others_parameters() {
    let smiles = ["CCO", "c1ccccc1Br", "CC(=O)[O-]"];
    let vocab = Vocabulary::build(smiles.iter().copied()).unwrap();
    let batch = batch_for(&vocab, &smiles);
    let model = Model::new(small_config(vocab.len(), 3), 1).unwrap();
    let before = model.infer(&batch).unwrap();
    let mut params = model.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..params.len() {
        if params.name(i).starts_with("heads.1.") {
            for v in params.tensors_mut()[i].data_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
    }
    let changed = Model::from_params(model.config().clone(), params).unwrap();
    let after = changed.infer(&batch).unwrap();
    for k in [0, 2] {
        assert_eq!(before.masks[k], after.masks[k]);
        assert_eq!(before.logits[k], after.logits[k]);
    }
    assert_ne!(before.logits[1], after.logits[1]);
}

#[test]
fn objective_grows_with_lambda_and_reports_consistent_terms() {
    let smiles = ["CCO", "CCBr", "OCC(=O)[O-]", "C1CC1"];
    let vocab = Vocabulary::build(smiles.iter().copied()).unwrap();
    let batch = batch_for(&vocab, &smiles);
    let model = Model::new(small_config(vocab.len(), 2), 3).unwrap();
    let labels = LabelMatrix::new(
        4,
        2,
        vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        vec![true, true, true, false, true, true, true, true],
    )
    .unwrap();
    let mut last = f64::NEG_INFINITY;
    for lambda in [0.0, 1e-4, 1e-3, 1e-2, 1e-1] {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &batch, None).unwrap();
        let cfg = ObjectiveConfig {
            lambda,
            ..ObjectiveConfig::default()
        };
        let (_, report) = objective(&mut tape, &fwd, &batch, &labels, &cfg).unwrap();
        assert!(report.total > last);
        assert!((report.total - report.reconstructed_total()).abs() < 1e-12);
        last = report.total;
    }
}

#[test]
fn a_task_without_labels_still_counts_toward_the_mean() {
    let smiles = ["CCO", "CCBr"];
    let vocab = Vocabulary::build(smiles.iter().copied()).unwrap();
    let batch = batch_for(&vocab, &smiles);
    let model = Model::new(small_config(vocab.len(), 2), 3).unwrap();
    let run = |delta: Vec<bool>| {
        let labels = LabelMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], delta).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &batch, None).unwrap();
        objective(&mut tape, &fwd, &batch, &labels, &ObjectiveConfig::default()).unwrap().1
    };
    let both = run(vec![true, true, true, true]);
    let first_only = run(vec![true, false, true, false]);
    assert_eq!(first_only.task_loss[1], 0.0);
    assert_eq!(first_only.labeled, vec![2, 0]);
    assert!((first_only.total - both.task_loss[0] / 2.0).abs() < 1e-15);
}

/// Textbook Adam followed by the decoupled decay term.
fn reference_adamw(w: &mut [f64], grads: &[Vec<f64>], cfg: &AdamWConfig, decay: bool) {
    let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..w.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            let wd = if decay { cfg.lr * cfg.weight_decay * w[i] } else { 0.0 };
            w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps) + wd;
        }
    }
}

#[test]
fn adamw_matches_a_reference_and_skips_decay_on_biases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for wd in [0.0, 0.01, 0.3] {
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        let mut params = ParamSet::new();
        params.push("lin.weight", random(&mut rng, &[4], 1.0));
        params.push("lin.bias", random(&mut rng, &[4], 1.0));
        params.push("norm.gain", random(&mut rng, &[4], 1.0));
        let steps: Vec<Vec<Vec<f64>>> = (0..6)
            .map(|_| (0..3).map(|_| random(&mut rng, &[4], 2.0).into_data()).collect())
            .collect();
        let mut expected: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.data().to_vec()).collect();
        for (i, w) in expected.iter_mut().enumerate() {
            let g: Vec<Vec<f64>> = steps.iter().map(|s| s[i].clone()).collect();
            reference_adamw(w, &g, &cfg, i == 0);
        }
        let mut state = OptimizerState::new(&params);
        for g in &steps {
            adamw_step(&mut params, g, &mut state, &cfg, &[true; 3]).unwrap();
        }
        for (t, e) in params.tensors().iter().zip(&expected) {
            for (a, b) in t.data().iter().zip(e) {
                assert!((a - b).abs() < 1e-12, "wd {wd}: {a} vs {b}");
            }
        }
    }
}

const TOKENS: &[&str] = &[
    "C", "N", "O", "S", "c", "n", "o", "Cl", "Br", "F", "I", "B", "(", ")", "=", "#", "1", "2", "%12", "[O-]", "[NH3+]",
    "[C@@H]", "/", "\\", ".", "+", "-", "@",
];

proptest! {
    #[test]
    fn tokenization_is_longest_match_and_lossless(picks in prop::collection::vec(prop::sample::select(TOKENS), 1..60)) {
        let s = picks.concat();
        let seq = tokenize(&s).unwrap();
        prop_assert_eq!(seq.joined(), s.clone());
        prop_assert_eq!(seq.tokens, picks.iter().map(|t| t.to_string()).collect::<Vec<_>>());
    }

    #[test]
    fn encode_then_decode_recovers_tokens(picks in prop::collection::vec(prop::sample::select(TOKENS), 1..30), pad in 0usize..5) {
        let s = picks.concat();
        let vocab = Vocabulary::build([s.as_str(), "CCO"]).unwrap();
        let back = Vocabulary::from_text(&vocab.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), vocab.to_text());
        let seq = tokenize(&s).unwrap();
        let enc = vocab.encode(&seq, seq.len_with_specials() + pad).unwrap();
        prop_assert_eq!(enc.ids[0], BOS);
        prop_assert_eq!(enc.ids[seq.tokens.len() + 1], EOS);
        prop_assert!(enc.ids[seq.tokens.len() + 2..].iter().all(|&i| i == PAD));
        let content: Vec<u32> = enc.ids[1..=seq.tokens.len()].to_vec();
        prop_assert_eq!(vocab.decode(&content), seq.tokens);
    }

    #[test]
    fn auc_is_rank_based(
        data in prop::collection::vec((0u8..12, any::<bool>(), prop::bool::weighted(0.9)), 2..120)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 11.0).collect();
        let labels: Vec<f64> = data.iter().map(|d| f64::from(u8::from(d.1))).collect();
        let delta: Vec<bool> = data.iter().map(|d| d.2).collect();
        let base = roc_auc(&scores, &labels, &delta);
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&warped, &labels, &delta), base);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let Some(a) = base {
            let b = roc_auc(&flipped, &labels, &delta).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
