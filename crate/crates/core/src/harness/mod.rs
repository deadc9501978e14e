//! Pre-training orchestration, cloze probing, checkpointing, and run
//! comparison.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod pretrain;
pub mod probe;

pub use checkpoint::{load_checkpoint, load_kg_embeddings, save_checkpoint, save_kg_embeddings};
pub use compare::{compare_runs, load_run_dir, CompareReport, RunLog};
pub use config::{Mode, RunConfig};
pub use pretrain::{pretrain, EpochProbe, PretrainOutcome, RunData, StepMetrics};
pub use probe::{probe, ProbeResult};
