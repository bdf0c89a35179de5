//! Named parameter tensors and their layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

// Stream offset for the copy-switch initializer, so enabling the copy head
// does not perturb any other parameter draw.
const COPY_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub attn: Attention,
    pub norm1: Norm,
    pub ff: FeedForward,
    pub norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross_attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
    pub norm3: Norm,
}

/// Indices of every parameter inside [`ModelParameters`].
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub output: Linear,
    pub copy: Option<Linear>,
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
    pub copy_head: bool,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            copy_head: false,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.add(format!("{name}.weight"), &[fan_in, fan_out], Init::Xavier),
            bias: self.add(format!("{name}.bias"), &[fan_out], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.query"), d, d),
            k: self.linear(&format!("{name}.key"), d, d),
            v: self.linear(&format!("{name}.value"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{name}.bias"), &[d], Init::Zeros),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            hidden: self.linear(&format!("{name}.hidden"), d, f),
            out: self.linear(&format!("{name}.out"), f, d),
        }
    }
}

pub(crate) fn layout_specs(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let (d, f, v) = (cfg.embedding_dim, cfg.feed_forward_dim, cfg.vocab_size);
    let mut b = Builder { specs: Vec::new() };
    let embedding = b.add("embedding".into(), &[v, d], Init::Xavier);
    let encoder = (0..cfg.encoder_layers)
        .map(|l| EncoderLayer {
            attn: b.attention(&format!("encoder.{l}.self_attn"), d),
            norm1: b.norm(&format!("encoder.{l}.norm1"), d),
            ff: b.feed_forward(&format!("encoder.{l}.ff"), d, f),
            norm2: b.norm(&format!("encoder.{l}.norm2"), d),
        })
        .collect();
    let decoder = (0..cfg.decoder_layers)
        .map(|l| DecoderLayer {
            self_attn: b.attention(&format!("decoder.{l}.self_attn"), d),
            norm1: b.norm(&format!("decoder.{l}.norm1"), d),
            cross_attn: b.attention(&format!("decoder.{l}.cross_attn"), d),
            norm2: b.norm(&format!("decoder.{l}.norm2"), d),
            ff: b.feed_forward(&format!("decoder.{l}.ff"), d, f),
            norm3: b.norm(&format!("decoder.{l}.norm3"), d),
        })
        .collect();
    let output = b.linear("output", d, v);
    let copy = cfg.copy_enabled.then(|| {
        let start = b.specs.len();
        let lin = b.linear("copy_switch", 3 * d, 1);
        for s in &mut b.specs[start..] {
            s.copy_head = true;
        }
        lin
    });
    let layout = Layout {
        embedding,
        encoder,
        decoder,
        output,
        copy,
    };
    (layout, b.specs)
}

/// All learned tensors, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    copy_head: Vec<bool>,
}

impl<T: Scalar> ModelParameters<T> {
    /// Xavier-uniform matrices, zero biases, unit norm gains. Parameters
    /// shared by copy-enabled and copy-disabled configurations draw from the
    /// same stream, so both receive identical values for a given seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (_, specs) = layout_specs(cfg);
        let mut shared = ChaCha8Rng::seed_from_u64(seed);
        let mut copy_rng = ChaCha8Rng::seed_from_u64(seed ^ COPY_STREAM);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut copy_head = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Xavier => {
                    let bound = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    let rng = if spec.copy_head { &mut copy_rng } else { &mut shared };
                    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            tensors.push(Tensor::from_vec(&spec.shape, data));
            names.push(spec.name);
            copy_head.push(spec.copy_head);
        }
        Ok(ModelParameters {
            names,
            tensors,
            copy_head,
        })
    }

    pub(crate) fn from_parts(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let (_, specs) = layout_specs(cfg);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        for (spec, (got_name, t)) in specs.iter().zip(&named) {
            let (name, shape) = (&spec.name, &spec.shape);
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
            }
        }
        let copy_head = specs.iter().map(|s| s.copy_head).collect();
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelParameters {
            names,
            tensors,
            copy_head,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Whether tensor `i` belongs to the copy switch.
    pub fn is_copy_head(&self, i: usize) -> bool {
        self.copy_head[i]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            copy_head: self.copy_head.clone(),
        }
    }
}
