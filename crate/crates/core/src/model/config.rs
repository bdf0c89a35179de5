use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults follow the submitted systems:
/// 256-dim embeddings, 4+4 layers, 1024-dim feed-forward, 4 heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub feed_forward_dim: usize,
    pub attention_heads: usize,
    pub copy_enabled: bool,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_source_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            embedding_dim: 256,
            encoder_layers: 4,
            decoder_layers: 4,
            feed_forward_dim: 1024,
            attention_heads: 4,
            copy_enabled: true,
            vocab_size,
            dropout: 0.1,
            max_source_len: 128,
        }
    }

    /// Small configuration for tests and desk-scale experiments.
    pub fn tiny(vocab_size: usize, dim: usize, layers: usize, heads: usize) -> Self {
        ModelConfig {
            embedding_dim: dim,
            encoder_layers: layers,
            decoder_layers: layers,
            feed_forward_dim: 4 * dim,
            attention_heads: heads,
            ..Self::new(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("feed_forward_dim", self.feed_forward_dim),
            ("attention_heads", self.attention_heads),
            ("vocab_size", self.vocab_size),
            ("max_source_len", self.max_source_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embedding_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} not divisible by {} attention heads",
                self.embedding_dim, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `key=value` lines, in the order used by checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("embedding_dim", self.embedding_dim.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("feed_forward_dim", self.feed_forward_dim.to_string()),
            ("attention_heads", self.attention_heads.to_string()),
            ("copy_enabled", self.copy_enabled.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_source_len", self.max_source_len.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::new(0);
        let mut seen = 0;
        for (key, value) in pairs {
            let bad = || Error::Checkpoint(format!("bad value {value:?} for {key}"));
            let int = || value.parse::<usize>().map_err(|_| bad());
            match key {
                "embedding_dim" => cfg.embedding_dim = int()?,
                "encoder_layers" => cfg.encoder_layers = int()?,
                "decoder_layers" => cfg.decoder_layers = int()?,
                "feed_forward_dim" => cfg.feed_forward_dim = int()?,
                "attention_heads" => cfg.attention_heads = int()?,
                "copy_enabled" => cfg.copy_enabled = value.parse().map_err(|_| bad())?,
                "vocab_size" => cfg.vocab_size = int()?,
                "dropout" => cfg.dropout = value.parse().map_err(|_| bad())?,
                "max_source_len" => cfg.max_source_len = int()?,
                _ => continue,
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(Error::Checkpoint("incomplete model configuration header".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_hyperparameter_table() {
        let c = ModelConfig::new(40);
        assert_eq!(
            (c.embedding_dim, c.encoder_layers, c.decoder_layers, c.feed_forward_dim, c.attention_heads),
            (256, 4, 4, 1024, 4)
        );
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig::tiny(10, 10, 1, 3);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::tiny(10, 8, 0, 1).validate().is_err());
    }

    #[test]
    fn header_pairs_round_trip() {
        let c = ModelConfig::tiny(33, 16, 2, 2);
        let pairs = c.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(c, back);
    }
}
