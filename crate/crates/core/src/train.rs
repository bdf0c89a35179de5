//! Teacher-forced training with optional hallucination pretraining,
//! per-epoch dev scoring and checkpoint ensembling.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, DEFAULT_HALLUCINATION_SIZE, LOW_RESOURCE_THRESHOLD};
use crate::data::{build_vocabulary, encode_source, EncodedSequence, InflectionExample};
use crate::decode::{greedy_decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::eval::exact_match_accuracy;
use crate::model::{dropout_rng, InflectionModel, ModelConfig};
use crate::optim::{adam_step, AdamConfig, OptimizerState, WarmupInverseSqrt};

const SHUFFLE_STREAM: u64 = 0x5bd1_e995_0000_0001;
const DROPOUT_STREAM: u64 = 0x5bd1_e995_0000_0002;

/// Component combinations a run may use: the five ablation systems plus the
/// plain transformer and pointer-generator of the low-resource comparison.
/// Order is `(copy, multitask, hallucinate)`.
pub const ALLOWED_FLAGS: [(bool, bool, bool); 7] = [
    (true, true, true),
    (true, false, true),
    (false, true, true),
    (false, false, true),
    (true, true, false),
    (true, false, false),
    (false, false, false),
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epoch cap of the finetune phase.
    pub max_epochs: usize,
    /// Fixed length of the pretrain phase.
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Finetune epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub copy: bool,
    pub multitask: bool,
    pub hallucinate: bool,
    pub hallucination_size: usize,
    pub low_resource_threshold: usize,
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 100,
            pretrain_epochs: 20,
            learning_rate: 1e-3,
            warmup_steps: 400,
            patience: 10,
            seed: 0,
            copy: true,
            multitask: true,
            hallucinate: true,
            hallucination_size: DEFAULT_HALLUCINATION_SIZE,
            low_resource_threshold: LOW_RESOURCE_THRESHOLD,
            label_smoothing: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_FLAGS.contains(&(self.copy, self.multitask, self.hallucinate)) {
            return Err(Error::Config(format!(
                "unsupported component combination copy={} multitask={} hallucinate={}",
                self.copy, self.multitask, self.hallucinate
            )));
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("hallucination_size", self.hallucination_size),
            ("low_resource_threshold", self.low_resource_threshold),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }

    /// `key=value` pairs for run manifests.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("copy", self.copy.to_string()),
            ("multitask", self.multitask.to_string()),
            ("hallucinate", self.hallucinate.to_string()),
            ("hallucination_size", self.hallucination_size.to_string()),
            ("low_resource_threshold", self.low_resource_threshold.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "pretrain" => Some(Phase::Pretrain),
            "finetune" => Some(Phase::Finetune),
            _ => None,
        }
    }
}

/// Parameters at the end of one epoch, with their dev score.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub model: InflectionModel<f32>,
}

impl Checkpoint {
    /// `{lang}.{phase}.e{epoch}.ckpt`
    pub fn file_name(&self, lang: &str) -> String {
        format!("{lang}.{}.e{}.ckpt", self.phase.label(), self.epoch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub dev_accuracy: f64,
}

/// Training data for both phases.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineData {
    pub pretrain: Option<Vec<InflectionExample>>,
    pub finetune: Vec<InflectionExample>,
}

/// Applies the multitask conversion and, for small training sets,
/// hallucination of a pretraining set from the original examples.
pub fn build_pipeline_data(train: &[InflectionExample], cfg: &TrainConfig) -> Result<PipelineData> {
    let finetune = if cfg.multitask {
        augment::multitask(train)
    } else {
        train.to_vec()
    };
    let pretrain = if cfg.hallucinate && train.len() < cfg.low_resource_threshold {
        let alphabet = augment::observed_alphabet(train);
        Some(augment::hallucinate(train, cfg.hallucination_size, &alphabet, cfg.seed)?)
    } else {
        None
    };
    Ok(PipelineData { pretrain, finetune })
}

/// Model configuration adapted to the vocabulary and copy flag of a run.
pub fn run_model_config(base: &ModelConfig, vocab_size: usize, cfg: &TrainConfig) -> ModelConfig {
    ModelConfig {
        vocab_size,
        copy_enabled: cfg.copy,
        ..base.clone()
    }
}

/// The initial model of a run: vocabulary over both phases' data, seeded
/// initialization.
pub fn initial_model(data: &PipelineData, base: &ModelConfig, cfg: &TrainConfig) -> Result<InflectionModel<f32>> {
    let mut all = data.finetune.clone();
    if let Some(p) = &data.pretrain {
        all.extend_from_slice(p);
    }
    let vocab = build_vocabulary(&all)?;
    let model_cfg = run_model_config(base, vocab.len(), cfg);
    InflectionModel::init(model_cfg, vocab, cfg.seed)
}

/// Exact-match accuracy of greedy decoding.
pub fn greedy_accuracy(model: &InflectionModel<f32>, examples: &[InflectionExample]) -> Result<f64> {
    let sources: Vec<EncodedSequence> = examples.iter().map(|e| encode_source(e, &model.vocab)).collect();
    let preds = greedy_decode(model, &sources, DecodeOptions::default())?;
    let gold: Vec<&str> = examples.iter().map(|e| e.form.as_str()).collect();
    let guess: Vec<&str> = preds.iter().map(|p| p.form.as_str()).collect();
    exact_match_accuracy(&gold, &guess)
}

/// Summary of a completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

struct PhaseRunner<'a> {
    model: &'a mut InflectionModel<f32>,
    cfg: &'a TrainConfig,
    shuffle: &'a mut ChaCha8Rng,
    dropout: &'a mut ChaCha8Rng,
}

impl PhaseRunner<'_> {
    fn epoch(&mut self, data: &[(EncodedSequence, String)], epoch: usize, opt: &mut OptimizerState<f32>) -> Result<f64> {
        let schedule = WarmupInverseSqrt {
            peak: self.cfg.learning_rate,
            warmup: self.cfg.warmup_steps,
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(self.shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<(EncodedSequence, String)> = idx.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) =
                self.model
                    .loss_and_gradients(&batch, self.cfg.label_smoothing, Some(&mut *self.dropout))?;
            if !loss.is_finite() || grads.is_empty() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            let lr = schedule.lr(opt.step_count() + 1);
            adam_step(opt, self.model.params.tensors_mut(), &grads, lr)?;
            total += loss as f64;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }
}

/// Runs the pretrain phase (when present) for its fixed length, then the
/// finetune phase with early stopping. Every epoch's checkpoint is handed to
/// `on_checkpoint` as soon as it is scored.
pub fn train_with<F>(
    data: &PipelineData,
    dev: &[InflectionExample],
    base: &ModelConfig,
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<TrainReport>
where
    F: FnMut(Checkpoint) -> Result<()>,
{
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    if data.finetune.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut model = initial_model(data, base, cfg)?;
    let encode = |m: &InflectionModel<f32>, set: &[InflectionExample]| -> Vec<(EncodedSequence, String)> {
        set.iter().map(|e| (encode_source(e, &m.vocab), e.form.clone())).collect()
    };
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut dropout = dropout_rng(cfg.seed ^ DROPOUT_STREAM);
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_early: false,
    };

    let mut phases = Vec::new();
    if let Some(p) = &data.pretrain {
        phases.push((Phase::Pretrain, encode(&model, p), cfg.pretrain_epochs, false));
    }
    phases.push((Phase::Finetune, encode(&model, &data.finetune), cfg.max_epochs, true));

    for (phase, set, epochs, early_stop) in phases {
        let mut opt = OptimizerState::new(model.params.tensors(), AdamConfig::default());
        let mut best = f64::NEG_INFINITY;
        let mut since_best = 0;
        for epoch in 1..=epochs {
            let mut runner = PhaseRunner {
                model: &mut model,
                cfg,
                shuffle: &mut shuffle,
                dropout: &mut dropout,
            };
            let loss = runner.epoch(&set, epoch, &mut opt)?;
            let dev_accuracy = greedy_accuracy(&model, dev)?;
            log::info!(
                "{} epoch {epoch}: loss {loss:.4}, dev accuracy {dev_accuracy:.4}",
                phase.label()
            );
            report.epochs.push(EpochRecord {
                phase,
                epoch,
                loss,
                dev_accuracy,
            });
            on_checkpoint(Checkpoint {
                phase,
                epoch,
                dev_accuracy,
                model: model.clone(),
            })?;
            if dev_accuracy > best {
                best = dev_accuracy;
                since_best = 0;
            } else {
                since_best += 1;
            }
            if early_stop && since_best >= cfg.patience && epoch < epochs {
                log::info!("no dev improvement for {since_best} epochs; stopping");
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// [`train_with`], keeping every checkpoint in memory.
pub fn train(
    data: &PipelineData,
    dev: &[InflectionExample],
    base: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Vec<Checkpoint>, TrainReport)> {
    let mut out = Vec::new();
    let report = train_with(data, dev, base, cfg, |c| {
        out.push(c);
        Ok(())
    })?;
    Ok((out, report))
}

/// The `k` best checkpoints by dev accuracy, later epochs first on ties.
pub fn select_ensemble(checkpoints: &[Checkpoint], k: usize) -> Result<Vec<&Checkpoint>> {
    if checkpoints.len() < k || k == 0 {
        return Err(Error::NotEnoughCheckpoints {
            requested: k,
            available: checkpoints.len(),
        });
    }
    let mut ranked: Vec<&Checkpoint> = checkpoints.iter().collect();
    ranked.sort_by(|a, b| selection_order((a.dev_accuracy, a.phase, a.epoch), (b.dev_accuracy, b.phase, b.epoch)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Ranking used by [`select_ensemble`] on `(dev_accuracy, phase, epoch)`:
/// best first, finetune before pretrain, later epoch before earlier.
pub fn selection_order(a: (f64, Phase, usize), b: (f64, Phase, usize)) -> Ordering {
    let rank = |p: Phase| matches!(p, Phase::Finetune);
    b.0.total_cmp(&a.0).then(rank(b.1).cmp(&rank(a.1))).then(b.2.cmp(&a.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize) -> Vec<InflectionExample> {
        (0..n)
            .map(|i| {
                let lemma: String = format!("ka{}ta", char::from(b'a' + (i % 26) as u8)) + &"l".repeat(i / 26 % 3);
                InflectionExample::new(lemma.clone(), format!("{lemma}s"), &["V", &format!("T{}", i % 4)])
            })
            .collect()
    }

    #[test]
    fn pipeline_thresholds() {
        let cfg = TrainConfig::default();
        let big = examples(1500);
        assert!(build_pipeline_data(&big, &cfg).unwrap().pretrain.is_none());
        let small = examples(100);
        assert_eq!(build_pipeline_data(&small, &cfg).unwrap().pretrain.unwrap().len(), 10_000);
        let off = TrainConfig {
            copy: false,
            multitask: false,
            hallucinate: false,
            ..cfg
        };
        let d = build_pipeline_data(&small, &off).unwrap();
        assert_eq!(d, PipelineData { pretrain: None, finetune: small });
    }

    #[test]
    fn flag_combinations_are_checked() {
        let bad = TrainConfig {
            copy: false,
            multitask: true,
            hallucinate: false,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        TrainConfig::default().validate().unwrap();
    }

    fn fake(epoch: usize, acc: f64, model: &InflectionModel<f32>) -> Checkpoint {
        Checkpoint {
            phase: Phase::Finetune,
            epoch,
            dev_accuracy: acc,
            model: model.clone(),
        }
    }

    #[test]
    fn ensemble_selection_orders_by_accuracy_then_epoch() {
        let vocab = build_vocabulary(&examples(3)).unwrap();
        let m = InflectionModel::init(ModelConfig::tiny(vocab.len(), 8, 1, 1), vocab, 0).unwrap();
        let accs = [0.1, 0.5, 0.3, 0.5, 0.9, 0.2, 0.4, 0.5, 0.0, 0.6];
        let cps: Vec<_> = accs.iter().enumerate().map(|(i, &a)| fake(i + 1, a, &m)).collect();
        let top: Vec<usize> = select_ensemble(&cps, 3).unwrap().iter().map(|c| c.epoch).collect();
        assert_eq!(top, vec![5, 10, 8]);
        assert_eq!(select_ensemble(&cps, 1).unwrap()[0].epoch, 5);
        let five: Vec<usize> = select_ensemble(&cps, 5).unwrap().iter().map(|c| c.epoch).collect();
        assert_eq!(five, vec![5, 10, 8, 4, 2]);
        assert!(matches!(
            select_ensemble(&cps[..2], 3),
            Err(Error::NotEnoughCheckpoints { requested: 3, available: 2 })
        ));
    }
}
