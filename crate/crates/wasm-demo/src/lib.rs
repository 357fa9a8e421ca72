//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Everything that does real work lives in [`demo`] and is plain Rust, so it
//! can be tested natively; the exported functions only translate errors.

pub mod demo;

use wasm_bindgen::prelude::*;

/// Tokens and lexical faults of one SMILES string, as JSON.
#[wasm_bindgen]
pub fn tokenize(smiles: &str) -> String {
    demo::tokenize_report(smiles)
}

/// ROC-AUC with every entry labeled; `undefined` when a class is missing.
#[wasm_bindgen]
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>, JsError> {
    demo::auc(scores, labels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct ToyModel(demo::Toy);

#[wasm_bindgen]
impl ToyModel {
    /// Trains on a generated bromine / [O-] dataset of `n` molecules.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, lambda: f64, epochs: usize, seed: u32, freeze_backbone: bool) -> Result<ToyModel, JsError> {
        let opts = demo::ToyOptions {
            n,
            lambda,
            epochs,
            seed: u64::from(seed),
            freeze_backbone,
        };
        demo::Toy::train(&opts).map(ToyModel).map_err(|e| JsError::new(&e))
    }

    pub fn summary(&self) -> String {
        self.0.summary_json()
    }

    pub fn explain(&self, smiles: &str) -> Result<String, JsError> {
        self.0.explain_json(smiles).map_err(|e| JsError::new(&e))
    }
}
