//! Knowledge-enhanced pre-training for a miniature transformer encoder.
//!
//! The crate trains a small BERT-style encoder on a synthetic corpus that
//! verbalizes a toy knowledge graph, and layers three mechanisms on top of
//! plain masked-language-model pre-training:
//!
//! * **noise-aware knowledge injection** — entity spans are scored by how
//!   much their removal perturbs the sentence representation; high-scoring
//!   and long-tail entities receive projected graph embeddings at the input
//!   ([`injection`]),
//! * **a per-entity memory bank** — windowed-context "local" and
//!   classifier-token "global" memories maintained by moving averages and
//!   mixed into the input with a decaying coefficient ([`memory_bank`]),
//! * **dynamic knowledge routing** — integrated-gradients attribution over
//!   FFN neurons selects per-layer knowledge paths, and back-propagation
//!   updates only the FFN parameters on those paths ([`routing`]).
//!
//! [`harness`] wires these into the pre-training loop, cloze-style probing,
//! and run comparison used by the CLI.

pub mod container;
pub mod corpus_kg;
pub mod error;
pub mod harness;
pub mod injection;
pub mod memory_bank;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod routing;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
