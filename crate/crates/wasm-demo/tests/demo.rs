use maskmtl_wasm::demo::{auc, tokenize_report, Toy, ToyOptions};

#[test]
fn tokenizer_report() {
    let v: serde_json::Value = serde_json::from_str(&tokenize_report("c1ccccc1Br")).unwrap();
    assert_eq!(v["tokens"].as_array().unwrap().len(), 9);
    assert!(v["faults"].as_array().unwrap().is_empty());
    let v: serde_json::Value = serde_json::from_str(&tokenize_report("C1CC")).unwrap();
    assert_eq!(v["faults"].as_array().unwrap().len(), 1);
    let v: serde_json::Value = serde_json::from_str(&tokenize_report("C[NH")).unwrap();
    assert!(v["tokens"].as_array().unwrap().is_empty());
}

#[test]
fn auc_checks_input() {
    assert_eq!(auc(&[0.8, 0.7, 0.6, 0.2], &[1.0, 0.0, 1.0, 0.0]), Ok(Some(0.75)));
    assert_eq!(auc(&[0.1, 0.2], &[1.0, 1.0]), Ok(None));
    assert!(auc(&[0.1], &[1.0, 0.0]).is_err());
    assert!(auc(&[0.1, 0.2], &[1.0, 2.0]).is_err());
}

#[test]
fn toy_model_trains_and_explains() {
    let toy = Toy::train(&ToyOptions {
        n: 60,
        epochs: 2,
        ..ToyOptions::default()
    })
    .unwrap();
    let s: serde_json::Value = serde_json::from_str(&toy.summary_json()).unwrap();
    assert_eq!(s["epoch_loss"].as_array().unwrap().len(), 2);
    let e: serde_json::Value = serde_json::from_str(&toy.explain_json("CC(Br)C([O-])C").unwrap()).unwrap();
    assert_eq!(e["tasks"].as_array().unwrap().len(), 2);
    assert_eq!(e["tasks"][0]["weights"].as_array().unwrap().len(), e["tokens"].as_array().unwrap().len());
    assert!(toy.explain_json("C[NH").is_err());
    assert!(Toy::train(&ToyOptions { n: 3, ..ToyOptions::default() }).is_err());
}
