//! Character-level transformer inflection with a pointer-generator copy
//! head, reinflection and hallucination data augmentation, checkpoint
//! ensembling and macro-averaged evaluation.

pub mod augment;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use data::{EncodedSequence, InflectionExample, Vocabulary};
pub use error::{Error, Result};
pub use model::{InflectionModel, ModelConfig, ModelParameters};
pub use tensor::{Scalar, Tensor};
