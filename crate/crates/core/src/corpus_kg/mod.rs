//! Toy knowledge graph, synthetic annotated corpus with a long-tail entity
//! frequency profile, and translational graph embeddings.

pub mod embed;
pub mod graph;
pub mod text;

pub use embed::{ranking_accuracy, train_kg_embeddings, KgEmbeddings, KgTrainOutcome};
pub use graph::{generate_kg, split_triples, Entity, KnowledgeGraph, Relation, Triple};
pub use text::{
    detect_long_tail, entity_frequency, generate_corpus, read_corpus, verbalize, write_corpus,
    AnnotatedSequence, EntitySpan, Vocab,
};
