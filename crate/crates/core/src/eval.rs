//! Exact-match accuracy, macro-averaged reports and the low-resource
//! copy-versus-vanilla comparison.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::augment::LOW_RESOURCE_THRESHOLD;
use crate::data::{encode_source, InflectionExample};
use crate::decode::{greedy_decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::model::{InflectionModel, ModelConfig};
use crate::train::{build_pipeline_data, initial_model, select_ensemble, train, Phase, TrainConfig};

/// Fraction of positions whose strings are codepoint-identical.
pub fn exact_match_accuracy<G: AsRef<str>, P: AsRef<str>>(gold: &[G], predicted: &[P]) -> Result<f64> {
    if gold.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: gold.len(),
            right: predicted.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Empty("accuracy input"));
    }
    let hits = gold.iter().zip(predicted).filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Low,
    Other,
}

impl Group {
    pub fn of(train_size: usize, threshold: usize) -> Group {
        if train_size < threshold {
            Group::Low
        } else {
            Group::Other
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::Low => "Low",
            Group::Other => "Other",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageResult {
    pub language: String,
    /// Original training set size, before any augmentation.
    pub train_size: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageRow {
    pub language: String,
    pub train_size: usize,
    pub group: Group,
    pub accuracy: f64,
}

/// Per-language accuracies with unweighted group means. A mean is `None`
/// when its group is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<LanguageRow>,
    pub low: Option<f64>,
    pub other: Option<f64>,
    pub all: f64,
    pub low_count: usize,
    pub other_count: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        // Summed in sorted order so the result does not depend on input order.
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn macro_report(results: &[LanguageResult]) -> Result<EvalReport> {
    macro_report_with(results, LOW_RESOURCE_THRESHOLD)
}

pub fn macro_report_with(results: &[LanguageResult], threshold: usize) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Empty("language results"));
    }
    let rows: Vec<LanguageRow> = results
        .iter()
        .map(|r| LanguageRow {
            language: r.language.clone(),
            train_size: r.train_size,
            group: Group::of(r.train_size, threshold),
            accuracy: r.accuracy,
        })
        .collect();
    let pick = |g: Option<Group>| -> Vec<f64> {
        rows.iter()
            .filter(|r| g.is_none_or(|g| r.group == g))
            .map(|r| r.accuracy)
            .collect()
    };
    let (low, other, all) = (pick(Some(Group::Low)), pick(Some(Group::Other)), pick(None));
    Ok(EvalReport {
        low_count: low.len(),
        other_count: other.len(),
        low: mean(&low),
        other: mean(&other),
        all: mean(&all).unwrap_or(0.0),
        rows,
    })
}

impl EvalReport {
    /// `language  size  group  accuracy` rows under a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("language\tsize\tgroup\taccuracy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.4}", r.language, r.train_size, r.group.label(), r.accuracy);
        }
        s
    }

    /// Low / Other / All lines with language counts.
    pub fn summary(&self) -> String {
        let fmt = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "Low\t{}\t(n={})", fmt(self.low), self.low_count);
        let _ = writeln!(s, "Other\t{}\t(n={})", fmt(self.other), self.other_count);
        let _ = writeln!(s, "All\t{}\t(n={})", fmt(Some(self.all)), self.rows.len());
        s
    }
}

/// `n` examples drawn without replacement, in original order.
pub fn subsample(train: &[InflectionExample], n: usize, seed: u64) -> Result<Vec<InflectionExample>> {
    if train.len() < n {
        return Err(Error::InsufficientData {
            needed: n,
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, train.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| train[i].clone()).collect())
}

/// One language of the low-resource study. Models are selected on `dev`
/// and scored on `test`, or on `dev` when no test set is given.
#[derive(Clone, Debug)]
pub struct LanguageData {
    pub language: String,
    pub train: Vec<InflectionExample>,
    pub dev: Vec<InflectionExample>,
    pub test: Option<Vec<InflectionExample>>,
}

#[derive(Clone, Debug)]
pub struct LowResourceConfig {
    pub model: ModelConfig,
    /// Shared by both arms; the copy flag is set per arm.
    pub train: TrainConfig,
    pub sample_size: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub accuracy: f64,
    /// Correct predictions containing a character outside the model's
    /// vocabulary.
    pub correct_oov: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub language: String,
    pub seed: u64,
    pub vanilla: ArmResult,
    pub pointer_generator: ArmResult,
    /// SHA-256 over the initial values of the tensors both arms share.
    pub shared_init_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowResourceReport {
    pub cells: Vec<CellResult>,
    pub mean_vanilla: f64,
    pub mean_pointer_generator: f64,
}

impl LowResourceReport {
    pub fn mean_delta(&self) -> f64 {
        self.mean_pointer_generator - self.mean_vanilla
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("language\tseed\ttrm\ttrm_pg\tdelta\ttrm_oov_correct\ttrm_pg_oov_correct\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{:+.4}\t{}\t{}",
                c.language,
                c.seed,
                c.vanilla.accuracy,
                c.pointer_generator.accuracy,
                c.pointer_generator.accuracy - c.vanilla.accuracy,
                c.vanilla.correct_oov,
                c.pointer_generator.correct_oov
            );
        }
        let _ = writeln!(
            s,
            "MEAN\t-\t{:.4}\t{:.4}\t{:+.4}\t-\t-",
            self.mean_vanilla,
            self.mean_pointer_generator,
            self.mean_delta()
        );
        s
    }
}

fn shared_hash(model: &InflectionModel<f32>) -> String {
    let mut h = Sha256::new();
    for (i, (name, t)) in model.params.names().iter().zip(model.params.tensors()).enumerate() {
        if model.params.is_copy_head(i) {
            continue;
        }
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn score(model: &InflectionModel<f32>, eval: &[InflectionExample]) -> Result<(f64, usize)> {
    let sources: Vec<_> = eval.iter().map(|e| encode_source(e, &model.vocab)).collect();
    let preds = greedy_decode(model, &sources, DecodeOptions::default())?;
    let gold: Vec<&str> = eval.iter().map(|e| e.form.as_str()).collect();
    let acc = exact_match_accuracy(&gold, &preds)?;
    let oov = preds
        .iter()
        .zip(&gold)
        .filter(|(p, g)| p.form == **g && p.form.chars().any(|c| model.vocab.char_id(c).is_none()))
        .count();
    Ok((acc, oov))
}

fn run_cell(lang: &LanguageData, seed: u64, cfg: &LowResourceConfig) -> Result<CellResult> {
    let sample = subsample(&lang.train, cfg.sample_size, seed)?;
    let eval = lang.test.as_deref().unwrap_or(&lang.dev);
    let arm_cfg = |copy: bool| TrainConfig {
        copy,
        seed,
        ..cfg.train.clone()
    };
    let (plain_cfg, pg_cfg) = (arm_cfg(false), arm_cfg(true));

    // Audit: the arms differ in the copy flag alone, and start from the
    // same draws for every shared tensor.
    let (mut a, mut b) = (plain_cfg.clone(), pg_cfg.clone());
    a.copy = true;
    b.copy = true;
    assert_eq!(a, b, "arm configurations differ beyond the copy flag");
    let plain_data = build_pipeline_data(&sample, &plain_cfg)?;
    let pg_data = build_pipeline_data(&sample, &pg_cfg)?;
    assert_eq!(plain_data, pg_data, "arms received different training data");
    let init_plain = initial_model(&plain_data, &cfg.model, &plain_cfg)?;
    let init_pg = initial_model(&pg_data, &cfg.model, &pg_cfg)?;
    let mut pc = init_pg.config.clone();
    pc.copy_enabled = false;
    assert_eq!(pc, init_plain.config, "model configurations differ beyond the copy flag");
    let shared_init_hash = shared_hash(&init_plain);
    assert_eq!(shared_init_hash, shared_hash(&init_pg), "shared initial parameters differ");

    let arm = |data, tcfg: &TrainConfig| -> Result<ArmResult> {
        let (cps, _) = train(data, &lang.dev, &cfg.model, tcfg)?;
        let finetune: Vec<_> = cps.into_iter().filter(|c| c.phase == Phase::Finetune).collect();
        let best = select_ensemble(&finetune, 1)?[0];
        let (accuracy, correct_oov) = score(&best.model, eval)?;
        Ok(ArmResult {
            accuracy,
            correct_oov,
            best_epoch: best.epoch,
        })
    };
    let (vanilla, pointer_generator) = rayon::join(|| arm(&plain_data, &plain_cfg), || arm(&pg_data, &pg_cfg));
    let (vanilla, pointer_generator) = (vanilla?, pointer_generator?);
    log::info!(
        "{} seed {seed}: trm {:.4}, trm-pg {:.4}",
        lang.language,
        vanilla.accuracy,
        pointer_generator.accuracy
    );
    Ok(CellResult {
        language: lang.language.clone(),
        seed,
        vanilla,
        pointer_generator,
        shared_init_hash,
    })
}

/// Trains a vanilla and a pointer-generator transformer on a seeded
/// subsample of every language, once per seed, and compares exact match.
pub fn low_resource_experiment(langs: &[LanguageData], cfg: &LowResourceConfig) -> Result<LowResourceReport> {
    if langs.is_empty() {
        return Err(Error::Empty("language list"));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let jobs: Vec<(&LanguageData, u64)> = langs.iter().flat_map(|l| cfg.seeds.iter().map(move |&s| (l, s))).collect();
    let cells = jobs
        .par_iter()
        .map(|(l, s)| run_cell(l, *s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let v: Vec<f64> = cells.iter().map(|c| c.vanilla.accuracy).collect();
    let p: Vec<f64> = cells.iter().map(|c| c.pointer_generator.accuracy).collect();
    Ok(LowResourceReport {
        mean_vanilla: mean(&v).unwrap_or(0.0),
        mean_pointer_generator: mean(&p).unwrap_or(0.0),
        cells,
    })
}
