//! Learn compact binary hash codes from precomputed embeddings and search
//! them in Hamming space.
//!
//! A small MLP head ([`hashcoder`]) maps each embedding to per-bit logits.
//! It is trained ([`trainer`]) so that the hard code of one view of an item
//! predicts the soft bits of the other view, while a coding-rate term keeps
//! the codes spread out ([`objective`]). Codes are bit-packed and searched
//! exhaustively under Hamming, asymmetric Hamming, BCE or symmetric BCE
//! ([`retrieval`]), and scored with mAP@k / recall@k ([`evalkit`]).
//!
//! The `parallel` feature (on by default) lets retrieval, encoding and
//! evaluation fan out over rayon. Training is always single-threaded.

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod hashcoder;
pub mod numkit;
pub mod objective;
pub mod pairing;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use evalkit::{LabelSet, Metric, MetricReport};
pub use exec::Execution;
pub use hashcoder::{Encoder, HashCoderModel, HeadId};
pub use numkit::{DenseMatrix, Rng};
pub use objective::{DiversityConfig, LossBreakdown};
pub use pairing::{PairBatch, PairSource, PairingConfig, PairingMode};
pub use retrieval::{Measure, PackedCodeSet, QueryBatch, RankedList};
pub use trainer::{TrainConfig, TrainLog, TrainOutcome, Variant};
