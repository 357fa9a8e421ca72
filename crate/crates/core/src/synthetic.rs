//! Rule-labelled toy molecule sets whose labels depend on known motifs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::LabelMatrix;

/// Generated SMILES with labels and the rule that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub smiles: Vec<String>,
    pub tasks: Vec<String>,
    pub labels: LabelMatrix,
}

impl SyntheticSet {
    /// CSV with a `smiles` column and one column per task; unlabeled cells
    /// are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("smiles");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (r, s) in self.smiles.iter().enumerate() {
            out.push_str(s);
            for k in 0..self.tasks.len() {
                out.push(',');
                if self.labels.labeled(r, k) {
                    out.push_str(if self.labels.y(r, k) == 1.0 { "1" } else { "0" });
                }
            }
            out.push('\n');
        }
        out
    }
}

const BACKBONE: &[&str] = &["C", "C", "C", "CC", "N", "O", "C(=O)", "c1ccccc1", "C1CCCC1", "S", "CN", "OC"];
const DISTRACTORS: &[&str] = &["(Cl)", "(F)", "(=O)", "(N)", "(O)", "(C)", "(C#N)", "(I)"];

/// Motifs with the exact token that marks them.
pub const BROMINE: &str = "Br";
pub const OXIDE: &str = "[O-]";
pub const SULFONYL: &str = "S(=O)(=O)";
pub const AMMONIUM: &str = "[NH3+]";

fn motif_fragment(motif: &str, rng: &mut impl Rng) -> String {
    match motif {
        BROMINE => {
            if rng.random_bool(0.5) {
                "(Br)".into()
            } else {
                "(CBr)".into()
            }
        }
        OXIDE => {
            if rng.random_bool(0.5) {
                "(C(=O)[O-])".into()
            } else {
                "([O-])".into()
            }
        }
        AMMONIUM => "([NH3+])".into(),
        other => other.to_string(),
    }
}

/// One molecule containing exactly the listed motifs (each once) among
/// random backbone pieces and distractor branches.
pub fn molecule(rng: &mut impl Rng, motifs: &[&str]) -> String {
    let n = rng.random_range(3..=7);
    let mut pieces: Vec<String> = (0..n)
        .map(|_| BACKBONE[rng.random_range(0..BACKBONE.len())].to_string())
        .collect();
    for _ in 0..rng.random_range(0..=2) {
        let at = rng.random_range(1..=pieces.len());
        pieces.insert(at, DISTRACTORS[rng.random_range(0..DISTRACTORS.len())].to_string());
    }
    for m in motifs {
        let at = rng.random_range(1..=pieces.len());
        pieces.insert(at, motif_fragment(m, rng));
    }
    pieces.concat()
}

fn build(n: usize, seed: u64, tasks: &[&str], motif_names: &[&str], rule: impl Fn(&[bool]) -> Vec<bool>, missing: f64) -> SyntheticSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = tasks.len();
    let mut smiles = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n * k);
    let mut delta = Vec::with_capacity(n * k);
    for _ in 0..n {
        let present: Vec<bool> = motif_names.iter().map(|_| rng.random_bool(0.5)).collect();
        let chosen: Vec<&str> = motif_names
            .iter()
            .zip(&present)
            .filter(|(_, &p)| p)
            .map(|(m, _)| *m)
            .collect();
        smiles.push(molecule(&mut rng, &chosen));
        for label in rule(&present) {
            y.push(if label { 1.0 } else { 0.0 });
            delta.push(!rng.random_bool(missing));
        }
    }
    SyntheticSet {
        smiles,
        tasks: tasks.iter().map(|t| t.to_string()).collect(),
        labels: LabelMatrix::new(n, k, y, delta).expect("binary labels"),
    }
}

/// Single task: positive exactly when the molecule contains bromine.
pub fn bromine_set(n: usize, seed: u64) -> SyntheticSet {
    build(n, seed, &["has_br"], &[BROMINE], |p| vec![p[0]], 0.0)
}

/// Two tasks on independent motifs: bromine and a charged oxygen.
pub fn two_motif_set(n: usize, seed: u64) -> SyntheticSet {
    build(n, seed, &["has_br", "has_oxide"], &[BROMINE, OXIDE], |p| vec![p[0], p[1]], 0.0)
}

/// Three tasks over four motifs, each task an OR of two motifs so every
/// motif is shared by two tasks; 15% of labels are missing.
pub fn shared_motif_family(n: usize, seed: u64) -> SyntheticSet {
    build(
        n,
        seed,
        &["tox_a", "tox_b", "tox_c"],
        &[BROMINE, OXIDE, SULFONYL, AMMONIUM],
        |p| vec![p[0] || p[1], p[1] || p[2], p[2] || p[3]],
        0.15,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{tokenize, validate};

    #[test]
    fn molecules_are_valid_and_labels_follow_the_rule() {
        let set = two_motif_set(300, 4);
        for (r, s) in set.smiles.iter().enumerate() {
            assert!(validate(s).is_empty(), "{s}");
            let toks = tokenize(s).unwrap().tokens;
            assert_eq!(set.labels.y(r, 0) == 1.0, toks.iter().any(|t| t == BROMINE), "{s}");
            assert_eq!(set.labels.y(r, 1) == 1.0, toks.iter().any(|t| t == OXIDE), "{s}");
        }
        let pos = set.labels.positive_count(0);
        assert!((100..200).contains(&pos), "{pos}");
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(bromine_set(20, 1).smiles, bromine_set(20, 1).smiles);
        assert_ne!(bromine_set(20, 1).smiles, bromine_set(20, 2).smiles);
        let fam = shared_motif_family(200, 0);
        for s in &fam.smiles {
            assert!(validate(s).is_empty(), "{s}");
        }
        assert!((0..3).all(|k| fam.labels.labeled_count(k) < 200));
    }
}
