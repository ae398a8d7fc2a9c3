//! BLSTM-LSTM encoder-decoder for sequence-labelling slot filling, with
//! interchangeable attention and focus context mechanisms, plus the
//! surrounding corpus, training, decoding and evaluation toolchain.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors on a reverse-mode tape (define-by-run).
//! * [`model`] — the encoder-decoder itself: peephole LSTM cells, the
//!   bidirectional encoder, the attention scorer and the focus shortcut.
//! * [`corpus`] — CoNLL TSV I/O, vocabulary with the singleton-`<unk>`
//!   rule, IOB validation/repair, slot-value augmentation.
//! * [`training`] — teacher-forced cross-entropy, per-sentence SGD,
//!   dropout, validation-based model selection, learning-rate grid search.
//! * [`infer`] — length-constrained beam search and chunk-F1 scoring.
//! * [`checkpoint`] — versioned, bit-exact parameter serialization.
//! * [`gradcheck`] — finite-difference verification of the whole model.
//! * [`synth`] — a toy slot grammar for fixtures and benchmarks.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use corpus::{Pair, Sentence, SlotLexicon, TagSequence, Vocabulary};
pub use error::{Error, Result};
pub use infer::{ChunkSpan, F1Report};
pub use model::{ContextMechanism, ModelConfig, ModelParams};
pub use rng::Prng;
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorId};
pub use training::{TrainConfig, TrainRecord};
