//! Character-level encoder-decoder transformer with a pointer-generator
//! output head.
//!
//! The decoder state `s` is projected to a distribution over the output
//! vocabulary, and a sigmoid switch over `[s; c; y_prev]` mixes it with a
//! copy distribution read off the head-averaged inter-attention of the last
//! decoder layer:
//!
//! ```text
//! P(c) = p_gen * P_vocab(c) + (1 - p_gen) * sum_{i : x_i = c} a_i
//! ```
//!
//! Copy mass is restricted to lemma characters: weight landing on BOS, tag
//! and EOS positions is renormalized away. Characters of the source lemma
//! that are missing from the vocabulary are appended as per-example
//! extension tokens so they can still be produced.

mod config;
mod io;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use io::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use params::ModelParameters;
use params::{Attention, FeedForward, Layout, Linear, Norm};

use crate::data::{EncodedSequence, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::graph::{AttentionMask, CopyMap, Graph, Var};
use crate::tensor::{Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Base vocabulary plus the source lemma's out-of-vocabulary characters,
/// appended in first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedVocabulary {
    base_size: usize,
    extension: Vec<String>,
}

impl ExtendedVocabulary {
    pub fn build(source: &EncodedSequence, base: &Vocabulary) -> Self {
        let mut extension: Vec<String> = Vec::new();
        for i in 1..=source.lemma_len {
            let s = &source.surface[i];
            if base.index(s).is_none() && !extension.contains(s) {
                extension.push(s.clone());
            }
        }
        ExtendedVocabulary {
            base_size: base.len(),
            extension,
        }
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn extension(&self) -> &[String] {
        &self.extension
    }

    pub fn len(&self) -> usize {
        self.base_size + self.extension.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of a surface character: its base id, else its extension slot.
    pub fn index(&self, base: &Vocabulary, surface: &str) -> Option<usize> {
        base.index(surface)
            .or_else(|| self.extension.iter().position(|e| e == surface).map(|i| self.base_size + i))
    }

    /// Surface string of an extended id.
    pub fn token<'a>(&'a self, base: &'a Vocabulary, id: usize) -> &'a str {
        if id < self.base_size {
            base.token(id)
        } else {
            &self.extension[id - self.base_size]
        }
    }
}

pub fn build_extended_vocabulary(source: &EncodedSequence, base: &Vocabulary) -> ExtendedVocabulary {
    ExtendedVocabulary::build(source, base)
}

/// Everything computed for one decoding step.
#[derive(Clone, Debug)]
pub struct DecoderStepOutput<T: Scalar = f32> {
    /// Final decoder state `s_t`.
    pub state: Vec<T>,
    /// Inter-attention of the last decoder layer, averaged over heads.
    pub attention: Vec<T>,
    /// `c_t = sum_i a_i h_i`.
    pub context: Vec<T>,
    /// Generation probability; 1 when the copy head is disabled.
    pub p_gen: T,
    /// Distribution over the extended vocabulary.
    pub distribution: Vec<T>,
    pub extended: ExtendedVocabulary,
}

/// Test hooks for the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    /// Replace the learned `p_gen` by a constant.
    pub force_p_gen: Option<f64>,
}

/// Source sequences encoded once and reused across decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedBatch<T: Scalar = f32> {
    pub sources: Vec<EncodedSequence>,
    pub extended: Vec<ExtendedVocabulary>,
    /// `[batch * max_len, dim]` encoder states, padded rows included.
    pub states: Tensor<T>,
    pub max_len: usize,
}

/// Parameters, configuration and vocabulary of one model.
#[derive(Clone, Debug)]
pub struct InflectionModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParameters<T>,
    layout: Layout,
    output_mask: Vec<bool>,
}

fn sinusoid<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut pe = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    pe
}

struct Decoded {
    state: Var,
    attention: Var,
    context: Var,
    gate: Option<Var>,
    probs: Var,
}

/// One forward pass recorded on a graph.
struct Forward<'m, 'r, T: Scalar> {
    g: Graph<T>,
    p: Vec<Var>,
    model: &'m InflectionModel<T>,
    dropout: Option<(f64, &'r mut ChaCha8Rng)>,
}

impl<'m, 'r, T: Scalar> Forward<'m, 'r, T> {
    fn new(model: &'m InflectionModel<T>, dropout: Option<(f64, &'r mut ChaCha8Rng)>) -> Self {
        let mut g = Graph::new();
        let p = model.params.tensors().iter().map(|t| g.leaf(t.clone())).collect();
        Forward { g, p, model, dropout }
    }

    fn dim(&self) -> usize {
        self.model.config.embedding_dim
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - *rate));
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
            .collect();
        self.g.mul_const(x, mask)
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let y = self.g.matmul(x, self.p[l.weight])?;
        self.g.add_row(y, self.p[l.bias])
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        self.g.layer_norm(x, self.p[n.gain], self.p[n.bias], T::of(NORM_EPS))
    }

    /// Multi-head attention; returns the projected output and the
    /// `[batch, heads, tq, tk]` weights before dropout.
    fn attention(&mut self, a: Attention, xq: Var, xkv: Var, mask: &AttentionMask) -> Result<(Var, Var)> {
        let q = self.linear(xq, a.q)?;
        let k = self.linear(xkv, a.k)?;
        let v = self.linear(xkv, a.v)?;
        let w = self.g.attention_weights(q, k, self.model.config.attention_heads, mask)?;
        let wd = self.drop(w)?;
        let o = self.g.attention_apply(wd, v)?;
        Ok((self.linear(o, a.out)?, w))
    }

    fn feed_forward(&mut self, x: Var, f: FeedForward) -> Result<Var> {
        let h = self.linear(x, f.hidden)?;
        let h = self.g.relu(h);
        let h = self.drop(h)?;
        self.linear(h, f.out)
    }

    /// Scaled embeddings plus positional encodings; also returns the raw
    /// embedding rows.
    fn embed(&mut self, ids: &[usize], len: usize) -> Result<(Var, Var)> {
        let d = self.dim();
        let raw = self.g.embedding(self.p[self.model.layout.embedding], ids)?;
        let scaled = self.g.scale(raw, T::of((d as f64).sqrt()));
        let pe = sinusoid::<T>(len, d);
        let tiled: Vec<T> = pe.iter().copied().cycle().take(ids.len() * d).collect();
        let pe = self.g.leaf(Tensor::from_vec(&[ids.len(), d], tiled));
        let x = self.g.add(scaled, pe)?;
        Ok((self.drop(x)?, raw))
    }

    fn encoder(&mut self, ids: &[usize], lens: &[usize], len: usize) -> Result<Var> {
        let (mut x, _) = self.embed(ids, len)?;
        let mask = AttentionMask::padded(lens, len, len, false);
        for layer in self.model.layout.encoder.clone() {
            let (a, _) = self.attention(layer.attn, x, x, &mask)?;
            let r = self.g.add(x, a)?;
            x = self.norm(r, layer.norm1)?;
            let f = self.feed_forward(x, layer.ff)?;
            let r = self.g.add(x, f)?;
            x = self.norm(r, layer.norm2)?;
        }
        Ok(x)
    }

    /// Decoder over `[batch * tgt_len]` input ids against encoder states
    /// `enc` (`[batch * src_len, dim]`).
    #[allow(clippy::too_many_arguments)]
    fn decoder(
        &mut self,
        enc: Var,
        src_lens: &[usize],
        src_len: usize,
        inputs: &[usize],
        tgt_lens: &[usize],
        tgt_len: usize,
        copy: Option<&CopyMap>,
        opts: StepOptions,
    ) -> Result<Decoded> {
        let batch = src_lens.len();
        let (mut x, raw) = self.embed(inputs, tgt_len)?;
        let self_mask = AttentionMask::padded(tgt_lens, tgt_len, tgt_len, true);
        let cross_mask = AttentionMask::padded(src_lens, tgt_len, src_len, false);
        let mut last_cross = None;
        for layer in self.model.layout.decoder.clone() {
            let (a, _) = self.attention(layer.self_attn, x, x, &self_mask)?;
            let r = self.g.add(x, a)?;
            x = self.norm(r, layer.norm1)?;
            let (c, w) = self.attention(layer.cross_attn, x, enc, &cross_mask)?;
            last_cross = Some(w);
            let r = self.g.add(x, c)?;
            x = self.norm(r, layer.norm2)?;
            let f = self.feed_forward(x, layer.ff)?;
            let r = self.g.add(x, f)?;
            x = self.norm(r, layer.norm3)?;
        }
        let state = x;
        let weights = last_cross.expect("config guarantees at least one decoder layer");
        let attention = self.g.head_mean(weights)?;
        let per_batch = self.g.reshape(attention, &[batch, 1, tgt_len, src_len])?;
        let context = self.g.attention_apply(per_batch, enc)?;

        let out = self.model.layout.output;
        let logits = self.linear(state, out)?;
        let vocab_probs = self.g.softmax(logits, Some(&self.model.output_mask))?;

        let (gate, probs) = match (self.model.layout.copy, copy) {
            (Some(switch), Some(copy)) => {
                let gate = match opts.force_p_gen {
                    Some(v) => self.g.leaf(Tensor::full(&[batch * tgt_len, 1], T::of(v))),
                    None => {
                        let feats = self.g.concat_cols(&[state, context, raw])?;
                        let z = self.linear(feats, switch)?;
                        self.g.sigmoid(z)
                    }
                };
                (Some(gate), self.g.copy_mix(vocab_probs, gate, attention, copy)?)
            }
            _ => (None, vocab_probs),
        };
        Ok(Decoded {
            state,
            attention,
            context,
            gate,
            probs,
        })
    }
}

impl<T: Scalar> InflectionModel<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, params: ModelParameters<T>) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let (layout, specs) = params::layout_specs(&config);
        if specs.len() != params.len()
            || specs.iter().zip(params.tensors()).any(|(s, t)| s.shape.as_slice() != t.shape())
        {
            return Err(Error::Config("parameters do not match the model configuration".into()));
        }
        let output_mask = vocab.output_mask();
        Ok(InflectionModel {
            config,
            vocab,
            params,
            layout,
            output_mask,
        })
    }

    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Self::new(config, vocab, params)
    }

    pub fn cast<U: Scalar>(&self) -> InflectionModel<U> {
        InflectionModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            output_mask: self.output_mask.clone(),
        }
    }

    pub fn max_decode_len(&self, source: &EncodedSequence) -> usize {
        2 * source.lemma_len + 10
    }

    fn check_source(&self, s: &EncodedSequence) -> Result<()> {
        if s.len() > self.config.max_source_len {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max: self.config.max_source_len,
            });
        }
        if s.len() < 3 || s.ids.iter().any(|&i| i >= self.vocab.len()) {
            return Err(Error::Shape(format!("malformed source of length {}", s.len())));
        }
        Ok(())
    }

    fn pad_sources(&self, sources: &[&EncodedSequence]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        for s in sources {
            self.check_source(s)?;
        }
        let len = sources.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sources.len() * len);
        for s in sources {
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok((ids, sources.iter().map(|s| s.len()).collect(), len))
    }

    fn copy_map(&self, sources: &[&EncodedSequence], ext: &[ExtendedVocabulary], rows: usize, src_len: usize) -> Option<CopyMap> {
        if !self.config.copy_enabled {
            return None;
        }
        let width = ext.iter().map(ExtendedVocabulary::len).max().unwrap_or(self.vocab.len());
        let mut map = Vec::with_capacity(sources.len() * src_len);
        for (s, e) in sources.iter().zip(ext) {
            for j in 0..src_len {
                map.push(if j < s.len() && s.is_lemma_position(j) {
                    e.index(&self.vocab, &s.surface[j])
                } else {
                    None
                });
            }
        }
        Some(CopyMap {
            batch: sources.len(),
            query_len: rows,
            key_len: src_len,
            width,
            map,
        })
    }

    /// Encoder states `h_1..h_T` of one source, shaped `[T, dim]`.
    pub fn encode(&self, source: &EncodedSequence) -> Result<Tensor<T>> {
        Ok(self.encode_batch(std::slice::from_ref(source))?.states)
    }

    pub fn encode_batch(&self, sources: &[EncodedSequence]) -> Result<EncodedBatch<T>> {
        let refs: Vec<&EncodedSequence> = sources.iter().collect();
        let (ids, lens, len) = self.pad_sources(&refs)?;
        let mut f = Forward::new(self, None);
        let enc = f.encoder(&ids, &lens, len)?;
        Ok(EncodedBatch {
            sources: sources.to_vec(),
            extended: sources.iter().map(|s| ExtendedVocabulary::build(s, &self.vocab)).collect(),
            states: f.g.value(enc).clone(),
            max_len: len,
        })
    }

    /// Decoder input ids for extended-vocabulary tokens: extension ids read
    /// as UNK.
    fn input_ids(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| if t >= self.vocab.len() { UNK } else { t }).collect()
    }

    /// Next-token distributions for a set of equal-length prefixes; prefix
    /// `i` belongs to source `owners[i]` of `batch`.
    pub fn next_distributions(
        &self,
        batch: &EncodedBatch<T>,
        owners: &[usize],
        prefixes: &[Vec<usize>],
        opts: StepOptions,
    ) -> Result<Vec<Vec<T>>> {
        Ok(self
            .step_outputs(batch, owners, prefixes, opts)?
            .into_iter()
            .map(|o| o.distribution)
            .collect())
    }

    fn step_outputs(
        &self,
        batch: &EncodedBatch<T>,
        owners: &[usize],
        prefixes: &[Vec<usize>],
        opts: StepOptions,
    ) -> Result<Vec<DecoderStepOutput<T>>> {
        if owners.len() != prefixes.len() {
            return Err(Error::LengthMismatch {
                left: owners.len(),
                right: prefixes.len(),
            });
        }
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let t = prefixes[0].len();
        if prefixes.iter().any(|p| p.first() != Some(&BOS)) {
            return Err(Error::MissingBos);
        }
        if prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::Shape("prefixes must share one length".into()));
        }
        let d = self.config.embedding_dim;
        let (src_len, n) = (batch.max_len, prefixes.len());
        let mut enc_rows = Vec::with_capacity(n * src_len * d);
        for &o in owners {
            enc_rows.extend_from_slice(&batch.states.data()[o * src_len * d..(o + 1) * src_len * d]);
        }
        let sources: Vec<&EncodedSequence> = owners.iter().map(|&o| &batch.sources[o]).collect();
        let ext: Vec<ExtendedVocabulary> = owners.iter().map(|&o| batch.extended[o].clone()).collect();
        let inputs: Vec<usize> = prefixes.iter().flat_map(|p| self.input_ids(p)).collect();
        let copy = self.copy_map(&sources, &ext, t, src_len);

        let mut f = Forward::new(self, None);
        let enc = f.g.leaf(Tensor::from_vec(&[n * src_len, d], enc_rows));
        let src_lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let out = f.decoder(enc, &src_lens, src_len, &inputs, &vec![t; n], t, copy.as_ref(), opts)?;

        let last: Vec<usize> = (0..n).map(|i| i * t + t - 1).collect();
        let pick = |f: &mut Forward<T>, v: Var| -> Result<Tensor<T>> {
            let r = f.g.gather_rows(v, &last)?;
            Ok(f.g.value(r).clone())
        };
        let state = pick(&mut f, out.state)?;
        let attention = pick(&mut f, out.attention)?;
        let context = pick(&mut f, out.context)?;
        let probs = pick(&mut f, out.probs)?;
        let gate = out.gate.map(|g| pick(&mut f, g)).transpose()?;
        Ok((0..n)
            .map(|i| {
                let e = ext[i].clone();
                let width = if self.config.copy_enabled { e.len() } else { self.vocab.len() };
                DecoderStepOutput {
                    state: state.row(i).to_vec(),
                    attention: attention.row(i)[..sources[i].len()].to_vec(),
                    context: context.row(i).to_vec(),
                    p_gen: gate.as_ref().map_or(T::one(), |g| g.row(i)[0]),
                    distribution: probs.row(i)[..width].to_vec(),
                    extended: e,
                }
            })
            .collect())
    }

    /// One decoding step for a single source, given its encoder states.
    pub fn decode_step(
        &self,
        prefix: &[usize],
        encoder_states: &Tensor<T>,
        source: &EncodedSequence,
        opts: StepOptions,
    ) -> Result<DecoderStepOutput<T>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::MissingBos);
        }
        let expected = [source.len(), self.config.embedding_dim];
        if encoder_states.shape() != expected {
            return Err(Error::Shape(format!(
                "encoder states {:?}, expected {expected:?}",
                encoder_states.shape()
            )));
        }
        let batch = EncodedBatch {
            sources: vec![source.clone()],
            extended: vec![ExtendedVocabulary::build(source, &self.vocab)],
            states: encoder_states.clone(),
            max_len: source.len(),
        };
        let mut out = self.step_outputs(&batch, &[0], &[prefix.to_vec()], opts)?;
        Ok(out.remove(0))
    }

    /// Gold ids of `form` followed by EOS. Characters outside the base
    /// vocabulary use their extension id when copying is enabled, else UNK.
    pub fn target_ids(&self, form: &str, ext: &ExtendedVocabulary) -> Vec<usize> {
        let mut ids: Vec<usize> = form
            .chars()
            .map(|c| {
                let s = c.to_string();
                match self.vocab.char_id(c) {
                    Some(id) => id,
                    None if self.config.copy_enabled => ext.index(&self.vocab, &s).unwrap_or(UNK),
                    None => UNK,
                }
            })
            .collect();
        ids.push(EOS);
        ids
    }

    fn loss_graph<'r>(
        &self,
        pairs: &[(EncodedSequence, String)],
        smoothing: f64,
        dropout: Option<&'r mut ChaCha8Rng>,
        opts: StepOptions,
    ) -> Result<(Forward<'_, 'r, T>, Var)> {
        if pairs.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let sources: Vec<&EncodedSequence> = pairs.iter().map(|(s, _)| s).collect();
        let (src_ids, src_lens, src_len) = self.pad_sources(&sources)?;
        let ext: Vec<ExtendedVocabulary> = sources.iter().map(|s| ExtendedVocabulary::build(s, &self.vocab)).collect();
        let targets: Vec<Vec<usize>> = pairs.iter().zip(&ext).map(|((_, t), e)| self.target_ids(t, e)).collect();
        let tgt_lens: Vec<usize> = targets.iter().map(Vec::len).collect();
        let tgt_len = *tgt_lens.iter().max().unwrap();
        let mut inputs = Vec::with_capacity(pairs.len() * tgt_len);
        let mut gold = Vec::with_capacity(pairs.len() * tgt_len);
        for t in &targets {
            inputs.push(BOS);
            inputs.extend(self.input_ids(&t[..t.len() - 1]));
            inputs.extend(std::iter::repeat_n(PAD, tgt_len - t.len()));
            gold.extend(t.iter().map(|&id| Some(id)));
            gold.extend(std::iter::repeat_n(None, tgt_len - t.len()));
        }
        let copy = self.copy_map(&sources, &ext, tgt_len, src_len);
        let width = copy.as_ref().map_or(self.vocab.len(), |c| c.width);
        let mut support = Vec::with_capacity(gold.len() * width);
        for e in &ext {
            let row: Vec<bool> = (0..width)
                .map(|c| if c < self.vocab.len() { self.output_mask[c] } else { self.config.copy_enabled && c < e.len() })
                .collect();
            for _ in 0..tgt_len {
                support.extend_from_slice(&row);
            }
        }

        let dropout = dropout.map(|rng| (self.config.dropout, rng));
        let mut f = Forward::new(self, dropout);
        let enc = f.encoder(&src_ids, &src_lens, src_len)?;
        let out = f.decoder(enc, &src_lens, src_len, &inputs, &tgt_lens, tgt_len, copy.as_ref(), opts)?;
        let loss = f.g.nll(out.probs, &gold, support, T::of(smoothing))?;
        Ok((f, loss))
    }

    /// Mean negative log-likelihood per non-padding target position under
    /// teacher forcing, without dropout or smoothing.
    pub fn sequence_loss(&self, pairs: &[(EncodedSequence, String)]) -> Result<T> {
        self.sequence_loss_with(pairs, StepOptions::default())
    }

    pub fn sequence_loss_with(&self, pairs: &[(EncodedSequence, String)], opts: StepOptions) -> Result<T> {
        let (f, loss) = self.loss_graph(pairs, 0.0, None, opts)?;
        Ok(f.g.value(loss).item())
    }

    /// Loss and per-parameter gradients for one training batch. Dropout is
    /// active when `rng` is given. A non-finite loss comes back with no
    /// gradients.
    pub fn loss_and_gradients(
        &self,
        pairs: &[(EncodedSequence, String)],
        smoothing: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let (f, loss) = self.loss_graph(pairs, smoothing, rng, StepOptions::default())?;
        let value = f.g.value(loss).item();
        if !value.is_finite() {
            log::warn!("non-finite value first produced by {:?}", f.g.first_non_finite());
            return Ok((value, Vec::new()));
        }
        let grads = f.g.backward(loss)?;
        let out = f
            .p
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.wrt(v, t))
            .collect();
        Ok((value, out))
    }

    /// Decoder states for a teacher-forced target, `[target_len + 1, dim]`.
    pub fn decoder_states(&self, source: &EncodedSequence, target: &[usize]) -> Result<Tensor<T>> {
        let (ids, lens, len) = self.pad_sources(&[source])?;
        let mut f = Forward::new(self, None);
        let enc = f.encoder(&ids, &lens, len)?;
        let mut inputs = vec![BOS];
        inputs.extend(self.input_ids(target));
        let n = inputs.len();
        let out = f.decoder(enc, &lens, len, &inputs, &[n], n, None, StepOptions::default())?;
        Ok(f.g.value(out.state).clone())
    }
}

/// Seeded RNG for dropout masks.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
