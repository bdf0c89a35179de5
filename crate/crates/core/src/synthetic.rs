//! Deterministic suffixation language for desk-scale experiments.
//!
//! Lemmas are random consonant-vowel syllable strings. Nouns take `N;PL`
//! (`+os`); verbs take `V;PST` (`+ed`) or `V;3;SG;PRS` (`+s`). Held-out
//! splits use lemmas never seen in training, optionally with consonants
//! drawn from a reserved set that never occurs in training data.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::InflectionExample;

pub const CONSONANTS: &[char] = &['p', 't', 'k', 'b', 'd', 'g', 'm', 'n', 'l', 'r', 'f', 'v', 'z'];
pub const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
/// Never used in training lemmas.
pub const OOV_CONSONANTS: &[char] = &['þ', 'ð', 'ŋ', 'ʃ', 'χ'];

/// `(tags, suffix)` for every slot.
pub const SLOTS: &[(&[&str], &str)] = &[
    (&["N", "PL"], "os"),
    (&["V", "PST"], "ed"),
    (&["V", "3", "SG", "PRS"], "s"),
];

/// The inflected form for a slot index of [`SLOTS`].
pub fn inflect(lemma: &str, slot: usize) -> String {
    format!("{lemma}{}", SLOTS[slot].1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Fraction of held-out lemma characters drawn from [`OOV_CONSONANTS`].
    pub oov_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 500,
            dev: 100,
            test: 200,
            oov_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<InflectionExample>,
    pub dev: Vec<InflectionExample>,
    pub test: Vec<InflectionExample>,
}

fn lemma(rng: &mut ChaCha8Rng, oov_consonant: f64) -> String {
    let syllables = rng.random_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        let c = if oov_consonant > 0.0 && rng.random::<f64>() < oov_consonant {
            OOV_CONSONANTS[rng.random_range(0..OOV_CONSONANTS.len())]
        } else {
            CONSONANTS[rng.random_range(0..CONSONANTS.len())]
        };
        s.push(c);
        s.push(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    s
}

fn example(rng: &mut ChaCha8Rng, lemma: String) -> InflectionExample {
    let slot = rng.random_range(0..SLOTS.len());
    let form = inflect(&lemma, slot);
    InflectionExample::new(lemma, form, SLOTS[slot].0)
}

/// Train, dev and test splits over pairwise disjoint lemma sets, one example
/// per lemma. Only dev and test lemmas carry OOV consonants.
pub fn suffixation_language(cfg: &SyntheticConfig) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    // Half of every lemma is consonants, so this per-consonant rate yields
    // `oov_rate` over all lemma characters.
    let per_consonant = (2.0 * cfg.oov_rate).min(1.0);
    let mut split = |n: usize, rate: f64, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let l = lemma(rng, rate);
            if seen.insert(l.clone()) {
                out.push(example(rng, l));
            }
        }
        out
    };
    let train = split(cfg.train, 0.0, &mut rng);
    let dev = split(cfg.dev, per_consonant, &mut rng);
    let test = split(cfg.test, per_consonant, &mut rng);
    SyntheticData { train, dev, test }
}

/// Whether a form contains a character from [`OOV_CONSONANTS`].
pub fn has_oov(form: &str) -> bool {
    form.chars().any(|c| OOV_CONSONANTS.contains(&c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_rule_governed() {
        let d = suffixation_language(&SyntheticConfig::default());
        assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (500, 100, 200));
        let train: HashSet<_> = d.train.iter().map(|e| e.lemma.clone()).collect();
        assert!(d.test.iter().chain(&d.dev).all(|e| !train.contains(&e.lemma)));
        for e in d.train.iter().chain(&d.test) {
            let slot = SLOTS.iter().position(|(t, _)| *t == e.tags.as_slice()).unwrap();
            assert_eq!(e.form, inflect(&e.lemma, slot));
        }
        assert!(!d.train.iter().any(|e| has_oov(&e.lemma)));
    }

    #[test]
    fn oov_rate_is_respected() {
        let cfg = SyntheticConfig {
            test: 2000,
            oov_rate: 0.1,
            ..SyntheticConfig::default()
        };
        let d = suffixation_language(&cfg);
        let (oov, total) = d.test.iter().fold((0, 0), |(o, t), e| {
            (o + e.lemma.chars().filter(|c| OOV_CONSONANTS.contains(c)).count(), t + e.lemma.chars().count())
        });
        let rate = oov as f64 / total as f64;
        assert!((rate - 0.1).abs() < 0.02, "{rate}");
        assert_eq!(d, suffixation_language(&cfg));
    }
}
