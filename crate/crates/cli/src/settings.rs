//! Configuration layering: built-in defaults, then a TOML file, then flags.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use pgt::train::TrainConfig;
use pgt::ModelConfig;

use crate::args::Hyper;
use crate::failure::usage;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embedding_dim: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub feed_forward_dim: Option<usize>,
    pub attention_heads: Option<usize>,
    pub dropout: Option<f64>,
    pub max_source_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub patience: Option<usize>,
    pub copy: Option<bool>,
    pub multitask: Option<bool>,
    pub hallucinate: Option<bool>,
    pub hallucination_size: Option<usize>,
    pub low_resource_threshold: Option<usize>,
    pub label_smoothing: Option<f64>,
}

pub fn load(path: &Path) -> anyhow::Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn set<T: Copy>(slot: &mut T, layers: &[Option<T>]) {
    if let Some(v) = layers.iter().rev().flatten().next() {
        *slot = *v;
    }
}

/// Resolved model and training configuration. The vocabulary size is filled
/// in later from the data.
pub fn resolve(hyper: &Hyper) -> anyhow::Result<(ModelConfig, TrainConfig)> {
    let file = match &hyper.config {
        Some(p) => load(p)?,
        None => FileConfig::default(),
    };
    let (fm, ft) = (&file.model, &file.train);
    let mut m = ModelConfig::new(0);
    set(&mut m.embedding_dim, &[fm.embedding_dim, hyper.embedding_dim]);
    set(&mut m.encoder_layers, &[fm.encoder_layers, hyper.layers]);
    set(&mut m.decoder_layers, &[fm.decoder_layers, hyper.layers]);
    set(&mut m.feed_forward_dim, &[fm.feed_forward_dim, hyper.feed_forward_dim]);
    set(&mut m.attention_heads, &[fm.attention_heads, hyper.attention_heads]);
    set(&mut m.dropout, &[fm.dropout, hyper.dropout]);
    set(&mut m.max_source_len, &[fm.max_source_len]);

    let mut t = TrainConfig::default();
    set(&mut t.seed, &[file.seed, hyper.seed]);
    set(&mut t.batch_size, &[ft.batch_size, hyper.batch_size]);
    set(&mut t.max_epochs, &[ft.max_epochs, hyper.max_epochs]);
    set(&mut t.pretrain_epochs, &[ft.pretrain_epochs, hyper.pretrain_epochs]);
    set(&mut t.learning_rate, &[ft.learning_rate, hyper.learning_rate]);
    set(&mut t.warmup_steps, &[ft.warmup_steps, hyper.warmup_steps]);
    set(&mut t.patience, &[ft.patience, hyper.patience]);
    set(&mut t.hallucination_size, &[ft.hallucination_size, hyper.hallucination_size]);
    set(
        &mut t.low_resource_threshold,
        &[ft.low_resource_threshold, hyper.low_resource_threshold],
    );
    set(&mut t.label_smoothing, &[ft.label_smoothing, hyper.label_smoothing]);
    let c = &hyper.components;
    set(&mut t.copy, &[ft.copy, c.copy()]);
    set(&mut t.multitask, &[ft.multitask, c.multitask()]);
    set(&mut t.hallucinate, &[ft.hallucinate, c.hallucinate()]);
    m.copy_enabled = t.copy;

    t.validate().map_err(|e| usage(e.to_string()))?;
    let mut probe = m.clone();
    probe.vocab_size = 5;
    probe.validate().map_err(|e| usage(e.to_string()))?;
    Ok((m, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::ComponentFlags;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 7\n[model]\nembedding_dim = 32\nattention_heads = 2\n[train]\nbatch_size = 8\nmultitask = false\n").unwrap();
        let hyper = Hyper {
            config: Some(path),
            batch_size: Some(4),
            components: ComponentFlags {
                no_hallucinate: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let (m, t) = resolve(&hyper).unwrap();
        assert_eq!(m.embedding_dim, 32);
        assert_eq!(m.encoder_layers, 4);
        assert_eq!(t.seed, 7);
        assert_eq!(t.batch_size, 4);
        assert_eq!((t.copy, t.multitask, t.hallucinate), (true, false, false));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nbatchsize = 8\n").unwrap();
        assert!(load(&path).is_err());
    }
}
