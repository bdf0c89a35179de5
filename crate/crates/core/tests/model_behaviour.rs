use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pgt::data::{build_vocabulary, encode_source, InflectionExample, BOS, EOS, UNK};
use pgt::decode::{beam_decode, beam_search, ensemble_decode, greedy_decode, greedy_search, DecodeOptions, Hypothesis};
use pgt::model::StepOptions;
use pgt::train::{build_pipeline_data, train, TrainConfig};
use pgt::{EncodedSequence, Error, InflectionModel, ModelConfig};

fn corpus() -> Vec<InflectionExample> {
    vec![
        InflectionExample::new("walk", "walked", &["V", "PST"]),
        InflectionExample::new("cat", "cats", &["N", "PL"]),
        InflectionExample::new("run", "runs", &["V", "3", "SG", "PRS"]),
    ]
}

fn model(copy: bool, seed: u64) -> InflectionModel {
    let vocab = build_vocabulary(&corpus()).unwrap();
    let mut cfg = ModelConfig::tiny(vocab.len(), 16, 2, 2);
    cfg.copy_enabled = copy;
    InflectionModel::init(cfg, vocab, seed).unwrap()
}

fn source(m: &InflectionModel, lemma: &str) -> EncodedSequence {
    encode_source(&InflectionExample::new(lemma, "", &["V", "PST"]), &m.vocab)
}

#[test]
fn distributions_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let alphabet: Vec<char> = "walkedcatsrunøæ".chars().collect();
    for trial in 0..60 {
        let m = model(trial % 3 != 0, trial);
        let len = rng.random_range(1..8);
        let lemma: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        let src = source(&m, &lemma);
        let enc = m.encode(&src).unwrap();
        let width = m.decode_step(&[BOS], &enc, &src, StepOptions::default()).unwrap().distribution.len();
        let steps = rng.random_range(0..6);
        let mut prefix = vec![BOS];
        prefix.extend((0..steps).map(|_| rng.random_range(EOS..width)));
        let out = m.decode_step(&prefix, &enc, &src, StepOptions::default()).unwrap();
        let total: f64 = out.distribution.iter().map(|&p| p as f64).sum();
        assert!((total - 1.0).abs() <= 1e-6, "trial {trial}: {total}");
    }
}

#[test]
fn forced_gate_limits() {
    let pg = model(true, 4);
    let plain = model(false, 4);
    let src = source(&pg, "ruøn");
    let enc = pg.encode(&src).unwrap();
    for prefix in [vec![BOS], vec![BOS, 5, 9]] {
        let one = pg.decode_step(&prefix, &enc, &src, StepOptions { force_p_gen: Some(1.0) }).unwrap();
        let vocab_only = plain.decode_step(&prefix, &enc, &src, StepOptions::default()).unwrap();
        let base = pg.vocab.len();
        assert_eq!(one.distribution[..base], vocab_only.distribution[..]);
        assert!(one.distribution[base..].iter().all(|&p| p == 0.0));

        let zero = pg.decode_step(&prefix, &enc, &src, StepOptions { force_p_gen: Some(0.0) }).unwrap();
        let lemma_ids: Vec<usize> = "ruøn".chars().map(|c| zero.extended.index(&pg.vocab, &c.to_string()).unwrap()).collect();
        for (id, &p) in zero.distribution.iter().enumerate() {
            if p > 0.0 {
                assert!(lemma_ids.contains(&id), "mass {p} on non-source token {id}");
            }
        }
    }
}

#[test]
fn decoder_is_causal() {
    let m = model(true, 9);
    let src = source(&m, "walk");
    let ids = |s: &str| s.chars().map(|c| m.vocab.char_id(c).unwrap()).collect::<Vec<_>>();
    let a = m.decoder_states(&src, &ids("walked")).unwrap();
    let b = m.decoder_states(&src, &ids("walkss")).unwrap();
    let d = m.config.embedding_dim;
    // Inputs are BOS + target, so state i sees target[..i].
    assert_eq!(a.data()[..5 * d], b.data()[..5 * d]);
    assert_ne!(a.data()[5 * d..6 * d], b.data()[5 * d..6 * d]);
}

#[test]
fn eos_forced_gives_empty_form() {
    let mut m = model(false, 2);
    m.params.get_mut("output.bias").unwrap().data_mut()[EOS] = 1e4;
    let preds = greedy_decode(&m, &[source(&m, "walk")], DecodeOptions::default()).unwrap();
    assert_eq!(preds[0].form, "");
    assert!(preds[0].score <= 0.0);
}

#[test]
fn copy_dominant_model_emits_oov_character() {
    let mut m = model(true, 3);
    m.params.get_mut("copy_switch.bias").unwrap().data_mut()[0] = -1e4;
    let preds = greedy_decode(&m, &[source(&m, "øøø")], DecodeOptions::default()).unwrap();
    assert!(preds[0].form.starts_with('ø'), "{:?}", preds[0].form);
    assert!(!preds[0].form.contains(pgt::decode::UNK_REPLACEMENT));

    let mut plain = model(false, 3);
    plain.params.get_mut("output.bias").unwrap().data_mut()[UNK] = 1e4;
    let p = greedy_decode(&plain, &[source(&plain, "øøø")], DecodeOptions::default()).unwrap();
    assert!(p[0].form.chars().all(|c| c == pgt::decode::UNK_REPLACEMENT));
    assert_eq!(p[0].unk_count, p[0].form.chars().count());
    assert_eq!(p[0].form.chars().count(), plain.max_decode_len(&source(&plain, "øøø")));
    let suppressed = greedy_decode(&plain, &[source(&plain, "øøø")], DecodeOptions { suppress_unk: true }).unwrap();
    assert_eq!(suppressed[0].unk_count, 0);
}

#[test]
fn greedy_is_deterministic_and_batch_independent() {
    let m = model(true, 5);
    let sources: Vec<_> = ["walk", "cat", "ruøn", "c"].iter().map(|l| source(&m, l)).collect();
    let batch = greedy_decode(&m, &sources, DecodeOptions::default()).unwrap();
    assert_eq!(batch, greedy_decode(&m, &sources, DecodeOptions::default()).unwrap());
    for (s, p) in sources.iter().zip(&batch) {
        let single = greedy_decode(&m, std::slice::from_ref(s), DecodeOptions::default()).unwrap();
        assert_eq!(single[0].form, p.form);
        assert!((single[0].score - p.score).abs() < 1e-4);
    }
}

#[test]
fn beam_width_one_is_greedy_and_wider_is_no_worse() {
    for seed in 0..4 {
        let m = model(seed % 2 == 0, seed);
        let sources: Vec<_> = ["walk", "cats", "ruøn"].iter().map(|l| source(&m, l)).collect();
        let greedy = greedy_decode(&m, &sources, DecodeOptions::default()).unwrap();
        let one = beam_decode(&m, &sources, 1).unwrap();
        for (g, b) in greedy.iter().zip(&one) {
            assert_eq!(g.form, b.form);
        }
        for src in &sources {
            let batch = m.encode_batch(std::slice::from_ref(src)).unwrap();
            let step = |p: &[Vec<usize>]| -> pgt::Result<Vec<Vec<f64>>> {
                let d = m.next_distributions(&batch, &vec![0; p.len()], p, StepOptions::default())?;
                Ok(d.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect())
            };
            let limit = m.max_decode_len(src);
            let w1 = beam_search(step, 1, limit).unwrap();
            let w5 = beam_search(step, 5, limit).unwrap();
            assert!(w5.normalized() >= w1.normalized());
        }
    }
    assert!(matches!(beam_decode(&model(true, 0), &[], 0), Err(Error::Config(_))));
}

/// Pseudo-random but fixed distribution over {EOS, 4, 5, 6} per prefix.
fn table(prefix: &[usize], salt: u64) -> Vec<f64> {
    let mut h = salt;
    for &t in prefix {
        h = h.wrapping_mul(0x100000001b3).wrapping_add(t as u64 + 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut d = vec![0.0; 7];
    for i in [EOS, 4, 5, 6] {
        d[i] = rng.random::<f64>() + 0.01;
    }
    let z: f64 = d.iter().sum();
    d.iter().map(|x| x / z).collect()
}

/// Every string of at most `max_len` tokens the search could return.
fn brute_force(step: &dyn Fn(&[usize]) -> Vec<f64>, max_len: usize) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    let mut frontier = vec![(vec![BOS], 0.0)];
    while let Some((prefix, score)) = frontier.pop() {
        let d = step(&prefix);
        for (tok, &p) in d.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut next = prefix.clone();
            next.push(tok);
            let s = score + p.ln();
            if tok == EOS || next.len() > max_len {
                let h = Hypothesis {
                    tokens: next[1..].to_vec(),
                    score: s,
                };
                if best.as_ref().is_none_or(|b| h.normalized() > b.normalized()) {
                    best = Some(h);
                }
            } else {
                frontier.push((next, s));
            }
        }
    }
    best.unwrap()
}

#[test]
fn exhaustive_beam_matches_brute_force() {
    for salt in 0..50 {
        let f = |p: &[usize]| table(p, salt);
        let step = |ps: &[Vec<usize>]| -> pgt::Result<Vec<Vec<f64>>> { Ok(ps.iter().map(|p| table(p, salt)).collect()) };
        let oracle = brute_force(&f, 3);
        let beam = beam_search(step, 64, 3).unwrap();
        assert!((beam.normalized() - oracle.normalized()).abs() < 1e-12, "salt {salt}");
    }
}

#[test]
fn narrow_beam_beats_greedy_on_trap() {
    // Greedy takes 4 (0.5) then faces a flat 3-way split; 5 (0.45) is
    // followed by EOS with certainty.
    let trap = |p: &[usize]| -> Vec<f64> {
        let mut d = vec![0.0; 7];
        match p {
            [BOS] => {
                d[4] = 0.5;
                d[5] = 0.45;
                d[EOS] = 0.05;
            }
            [BOS, 4] => {
                d[EOS] = 0.34;
                d[4] = 0.33;
                d[6] = 0.33;
            }
            _ => d[EOS] = 1.0,
        }
        d
    };
    let step = |ps: &[Vec<usize>]| -> pgt::Result<Vec<Vec<f64>>> { Ok(ps.iter().map(|p| trap(p)).collect()) };
    let oracle = brute_force(&trap, 3);
    assert_eq!(oracle.tokens, vec![5, EOS]);
    let greedy = greedy_search(step, 3).unwrap();
    assert_eq!(greedy.tokens, vec![4, EOS]);
    let beam = beam_search(step, 2, 3).unwrap();
    assert_eq!(beam.tokens, oracle.tokens);
}

#[test]
fn ensemble_of_identical_models_is_the_single_model() {
    let m = model(true, 8);
    let sources: Vec<_> = ["walk", "cat", "ruøn"].iter().map(|l| source(&m, l)).collect();
    let single: Vec<String> = greedy_decode(&m, &sources, DecodeOptions::default())
        .unwrap()
        .into_iter()
        .map(|p| p.form)
        .collect();
    let models = vec![m.clone(), m.clone(), m.clone()];
    assert_eq!(ensemble_decode(&models, &sources, 1, DecodeOptions::default()).unwrap(), single);

    let other_vocab = build_vocabulary(&[InflectionExample::new("xyz", "xyzq", &["N"])]).unwrap();
    let other = InflectionModel::init(ModelConfig::tiny(other_vocab.len(), 16, 2, 2), other_vocab, 0).unwrap();
    assert!(matches!(
        ensemble_decode(&[m, other], &sources, 1, DecodeOptions::default()),
        Err(Error::VocabularyMismatch { .. })
    ));
}

#[test]
fn overfit_model_emits_hugged() {
    let data = vec![InflectionExample::new("hug", "hugged", &["V", "PST"])];
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 150,
        warmup_steps: 10,
        patience: 150,
        learning_rate: 3e-3,
        copy: true,
        multitask: false,
        hallucinate: false,
        ..TrainConfig::default()
    };
    let pd = build_pipeline_data(&data, &cfg).unwrap();
    let base = ModelConfig::tiny(0, 16, 1, 2);
    let (cps, _) = train(&pd, &data, &base, &cfg).unwrap();
    let last = &cps.last().unwrap().model;
    let p = greedy_decode(last, &[encode_source(&data[0], &last.vocab)], DecodeOptions::default()).unwrap();
    assert_eq!(p[0].form, "hugged");
}
