//! Greedy and beam decoding over the extended vocabulary, plus
//! majority-vote ensembling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{EncodedSequence, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::model::{EncodedBatch, ExtendedVocabulary, InflectionModel, StepOptions};
use crate::tensor::Scalar;

/// Rendered in place of an unknown-token prediction.
pub const UNK_REPLACEMENT: char = '\u{25A1}';

pub const DEFAULT_BEAM_WIDTH: usize = 4;

/// Sources decoded together in one batched forward pass.
const CHUNK: usize = 64;

/// One model's answer for one source.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub form: String,
    pub model_id: usize,
    /// Sum of token log-probabilities, EOS included.
    pub score: f64,
    /// Number of UNK tokens rendered as [`UNK_REPLACEMENT`].
    pub unk_count: usize,
}

impl AsRef<str> for Prediction {
    fn as_ref(&self) -> &str {
        &self.form
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Never pick UNK; the best remaining token is taken instead.
    pub suppress_unk: bool,
}

/// A token sequence with its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens after BOS, EOS included when the sequence finished.
    pub tokens: Vec<usize>,
    pub score: f64,
}

impl Hypothesis {
    /// Log-probability per emitted token.
    pub fn normalized(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.score / self.tokens.len() as f64
        }
    }
}

/// Lowest-index argmax over the tokens allowed by `skip`.
fn argmax(dist: &[f64], skip: Option<usize>) -> usize {
    let mut best = 0;
    let mut best_p = f64::NEG_INFINITY;
    for (i, &p) in dist.iter().enumerate() {
        if Some(i) != skip && p > best_p {
            best = i;
            best_p = p;
        }
    }
    best
}

/// Greedy search over an arbitrary next-token distribution. `step` maps a
/// set of equal-length prefixes (BOS first) to one distribution per prefix.
pub fn greedy_search<F>(mut step: F, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    let mut prefix = vec![BOS];
    let mut score = 0.0;
    while prefix.len() <= max_len {
        let dist = step(std::slice::from_ref(&prefix))?.remove(0);
        let tok = argmax(&dist, None);
        score += dist[tok].ln();
        prefix.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        score,
    })
}

/// Beam search with length-normalized final scoring. Hypotheses are pruned
/// by total log-probability; finished ones compete on
/// [`Hypothesis::normalized`]. The greedy path is always among the
/// candidates, so a wider beam never scores below a narrower one's greedy
/// baseline.
pub fn beam_search<F>(mut step: F, width: usize, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let greedy = greedy_search(&mut step, max_len)?;
    let mut alive = vec![(vec![BOS], 0.0f64)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() && finished.len() < width {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let dists = step(&prefixes)?;
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        for (h, dist) in dists.iter().enumerate() {
            for (tok, &p) in dist.iter().enumerate() {
                if p > 0.0 {
                    expansions.push((alive[h].1 + p.ln(), h, tok));
                }
            }
        }
        // Stable: equal scores keep hypothesis order, then token order.
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(width);
        for (score, h, tok) in expansions.into_iter().take(width - finished.len()) {
            let mut prefix = alive[h].0.clone();
            prefix.push(tok);
            if tok == EOS || prefix.len() > max_len {
                finished.push(Hypothesis {
                    tokens: prefix[1..].to_vec(),
                    score,
                });
            } else {
                next.push((prefix, score));
            }
        }
        alive = next;
    }
    let mut best = greedy;
    for h in finished {
        if h.normalized() > best.normalized() {
            best = h;
        }
    }
    Ok(best)
}

fn render<T: Scalar>(model: &InflectionModel<T>, ext: &ExtendedVocabulary, tokens: &[usize]) -> (String, usize) {
    let mut form = String::new();
    let mut unks = 0;
    for &t in tokens {
        match t {
            EOS => break,
            UNK => {
                form.push(UNK_REPLACEMENT);
                unks += 1;
            }
            t => form.push_str(ext.token(&model.vocab, t)),
        }
    }
    if unks > 0 {
        log::debug!("emitted {unks} unknown token(s) in {form:?}");
    }
    (form, unks)
}

fn to_f64<T: Scalar>(dists: Vec<Vec<T>>) -> Vec<Vec<f64>> {
    dists
        .into_iter()
        .map(|d| d.into_iter().map(|p| p.to_f64().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn greedy_chunk<T: Scalar>(
    model: &InflectionModel<T>,
    sources: &[EncodedSequence],
    opts: DecodeOptions,
) -> Result<Vec<Prediction>> {
    let batch: EncodedBatch<T> = model.encode_batch(sources)?;
    let limits: Vec<usize> = sources.iter().map(|s| model.max_decode_len(s)).collect();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; sources.len()];
    let mut scores = vec![0.0f64; sources.len()];
    let mut active: Vec<usize> = (0..sources.len()).collect();
    while !active.is_empty() {
        let current: Vec<Vec<usize>> = active.iter().map(|&i| prefixes[i].clone()).collect();
        let dists = to_f64(model.next_distributions(&batch, &active, &current, StepOptions::default())?);
        let skip = opts.suppress_unk.then_some(UNK);
        let mut still = Vec::with_capacity(active.len());
        for (&i, dist) in active.iter().zip(&dists) {
            let tok = argmax(dist, skip);
            scores[i] += dist[tok].ln();
            prefixes[i].push(tok);
            if tok != EOS && prefixes[i].len() <= limits[i] {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(prefixes
        .iter()
        .zip(&batch.extended)
        .zip(scores)
        .map(|((p, ext), score)| {
            let (form, unk_count) = render(model, ext, &p[1..]);
            Prediction {
                form,
                model_id: 0,
                score,
                unk_count,
            }
        })
        .collect())
}

/// Greedy decoding of every source: argmax at each step (lowest index on
/// ties) until EOS or `2 * lemma_len + 10` tokens.
pub fn greedy_decode<T: Scalar>(
    model: &InflectionModel<T>,
    sources: &[EncodedSequence],
    opts: DecodeOptions,
) -> Result<Vec<Prediction>> {
    let chunks = sources
        .par_chunks(CHUNK)
        .map(|c| greedy_chunk(model, c, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Beam decoding of every source.
pub fn beam_decode<T: Scalar>(
    model: &InflectionModel<T>,
    sources: &[EncodedSequence],
    width: usize,
) -> Result<Vec<Prediction>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    sources
        .par_iter()
        .map(|src| {
            let batch = model.encode_batch(std::slice::from_ref(src))?;
            let step = |prefixes: &[Vec<usize>]| {
                let owners = vec![0; prefixes.len()];
                Ok(to_f64(model.next_distributions(&batch, &owners, prefixes, StepOptions::default())?))
            };
            let best = beam_search(step, width, model.max_decode_len(src))?;
            let (form, unk_count) = render(model, &batch.extended[0], &best.tokens);
            Ok(Prediction {
                form,
                model_id: 0,
                score: best.score,
                unk_count,
            })
        })
        .collect()
}

/// Most frequent form; ties are settled by a seeded uniform draw over the
/// tied forms in order of first appearance.
pub fn majority_vote<S: AsRef<str>>(predictions: &[S], seed: u64) -> Result<String> {
    if predictions.is_empty() {
        return Err(Error::Empty("ensemble predictions"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for p in predictions {
        let c = counts.entry(p.as_ref()).or_insert(0);
        if *c == 0 {
            order.push(p.as_ref());
        }
        *c += 1;
    }
    let top = order.iter().map(|f| counts[f]).max().unwrap_or(0);
    let tied: Vec<&str> = order.into_iter().filter(|f| counts[f] == top).collect();
    let pick = if tied.len() == 1 {
        0
    } else {
        ChaCha8Rng::seed_from_u64(seed).random_range(0..tied.len())
    };
    Ok(tied[pick].to_string())
}

/// Greedy decode with every model, then vote per source. Vote seeds are
/// `seed + source index`.
pub fn ensemble_decode<T: Scalar>(
    models: &[InflectionModel<T>],
    sources: &[EncodedSequence],
    seed: u64,
    opts: DecodeOptions,
) -> Result<Vec<String>> {
    if models.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let hash = models[0].vocab.hash();
    if let Some(m) = models.iter().find(|m| m.vocab.hash() != hash) {
        return Err(Error::VocabularyMismatch {
            expected: hash,
            found: m.vocab.hash(),
        });
    }
    let mut per_model = Vec::with_capacity(models.len());
    for (id, m) in models.iter().enumerate() {
        let mut preds = greedy_decode(m, sources, opts)?;
        for p in &mut preds {
            p.model_id = id;
        }
        per_model.push(preds);
    }
    (0..sources.len())
        .map(|i| {
            let votes: Vec<&Prediction> = per_model.iter().map(|p| &p[i]).collect();
            let forms: Vec<&str> = votes.iter().map(|p| p.form.as_str()).collect();
            majority_vote(&forms, seed.wrapping_add(i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three-step toy where greedy takes token 4 (p 0.6) then is stuck with
    /// a flat continuation, while token 5 (p 0.4) leads to a sure EOS.
    fn toy(prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut d = vec![0.0; 6];
                match p.as_slice() {
                    [BOS] => {
                        d[4] = 0.6;
                        d[5] = 0.4;
                    }
                    [BOS, 4] => {
                        d[EOS] = 0.3;
                        d[4] = 0.35;
                        d[5] = 0.35;
                    }
                    [BOS, 5] => d[EOS] = 1.0,
                    _ => d[EOS] = 1.0,
                }
                d
            })
            .collect())
    }

    #[test]
    fn beam_escapes_greedy_trap() {
        let g = greedy_search(toy, 3).unwrap();
        assert_eq!(g.tokens, vec![4, 4, EOS]);
        let b = beam_search(toy, 2, 3).unwrap();
        assert_eq!(b.tokens, vec![5, EOS]);
        assert!(b.normalized() > g.normalized());
        assert_eq!(beam_search(toy, 1, 3).unwrap(), g);
        assert!(beam_search(toy, 0, 3).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4], None), 1);
        assert_eq!(argmax(&[0.2, 0.4, 0.4], Some(1)), 2);
    }

    #[test]
    fn vote_unique_mode_and_single() {
        assert_eq!(majority_vote(&["hugged", "hugged", "huged"], 0).unwrap(), "hugged");
        assert_eq!(majority_vote(&["x"], 3).unwrap(), "x");
        assert!(majority_vote::<&str>(&[], 0).is_err());
    }

    #[test]
    fn vote_tie_is_seeded_and_balanced() {
        assert_eq!(majority_vote(&["a", "b"], 17).unwrap(), majority_vote(&["a", "b"], 17).unwrap());
        let a = (0..10_000u64).filter(|&s| majority_vote(&["a", "b"], s).unwrap() == "a").count();
        let frac = a as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }
}
