//! Toy knowledge graph: entities, relations, and (head, relation, tail)
//! triples, generated deterministically from a seed.

use std::collections::HashSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::mix_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    pub surface: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub triples: Vec<Triple>,
}

impl KnowledgeGraph {
    pub fn validate(&self) -> Result<()> {
        if self.entities.len() < 2 || self.relations.is_empty() {
            return Err(Error::InvalidConfig("need >= 2 entities and >= 1 relation".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.triples {
            if t.head >= self.entities.len()
                || t.tail >= self.entities.len()
                || t.relation >= self.relations.len()
            {
                return Err(Error::IndexOutOfRange(format!("triple {t:?}")));
            }
            if !seen.insert(*t) {
                return Err(Error::InvalidConfig(format!("duplicate triple {t:?}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let kg: KnowledgeGraph = serde_json::from_str(s)?;
        kg.validate()?;
        Ok(kg)
    }
}

/// Generates a toy graph in which every entity takes part in at least one
/// triple, heads never equal tails, and no triple repeats.
pub fn generate_kg(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_triples: usize,
) -> Result<KnowledgeGraph> {
    if n_entities < 2 || n_relations < 1 {
        return Err(Error::InvalidArgument("need >= 2 entities and >= 1 relation".into()));
    }
    let min_triples = n_entities.div_ceil(2);
    if n_triples < min_triples {
        return Err(Error::InvalidArgument(format!(
            "{n_triples} triples cannot cover {n_entities} entities (entities would be orphaned; \
             need >= {min_triples})"
        )));
    }
    let max_triples = n_entities * (n_entities - 1) * n_relations;
    if n_triples > max_triples {
        return Err(Error::InvalidArgument(format!(
            "unsatisfiable counts: {n_triples} distinct triples requested, only {max_triples} exist"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples: Vec<Triple> = Vec::with_capacity(n_triples);
    let mut seen: HashSet<Triple> = HashSet::new();

    // Coverage pass: pair up a shuffled entity list.
    let mut order: Vec<usize> = (0..n_entities).collect();
    order.shuffle(&mut rng);
    let mut i = 0;
    while i < n_entities {
        let head = order[i];
        let tail = if i + 1 < n_entities {
            order[i + 1]
        } else {
            // odd count: link the last entity back to a random earlier one
            order[rng.random_range(0..i)]
        };
        loop {
            let t = Triple { head, relation: rng.random_range(0..n_relations), tail };
            if seen.insert(t) {
                triples.push(t);
                break;
            }
        }
        i += 2;
    }

    // Fill pass. At high density sampling would thrash, so enumerate instead.
    if n_triples * 2 > max_triples {
        let mut all: Vec<Triple> = Vec::with_capacity(max_triples);
        for head in 0..n_entities {
            for tail in 0..n_entities {
                if head == tail {
                    continue;
                }
                for relation in 0..n_relations {
                    let t = Triple { head, relation, tail };
                    if !seen.contains(&t) {
                        all.push(t);
                    }
                }
            }
        }
        all.shuffle(&mut rng);
        for t in all.into_iter().take(n_triples - triples.len()) {
            triples.push(t);
        }
    } else {
        while triples.len() < n_triples {
            let head = rng.random_range(0..n_entities);
            let tail = rng.random_range(0..n_entities);
            if head == tail {
                continue;
            }
            let t = Triple { head, relation: rng.random_range(0..n_relations), tail };
            if seen.insert(t) {
                triples.push(t);
            }
        }
    }

    let kg = KnowledgeGraph {
        entities: (0..n_entities).map(|id| Entity { id, surface: format!("ent{id}") }).collect(),
        relations: (0..n_relations)
            .map(|id| Relation { id, surface: format!("rel{id}") })
            .collect(),
        triples,
    };
    kg.validate()?;
    Ok(kg)
}

/// Splits triples into a training graph and a held-out probe set,
/// stratified per relation so the macro-averaged metric keeps every
/// relation represented.
pub fn split_triples(
    kg: &KnowledgeGraph,
    seed: u64,
    holdout_frac: f64,
) -> Result<(KnowledgeGraph, Vec<Triple>)> {
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must be in [0, 1), got {holdout_frac}"
        )));
    }
    let mut train: Vec<Triple> = Vec::new();
    let mut heldout: Vec<Triple> = Vec::new();
    for rel in 0..kg.relations.len() {
        let mut group: Vec<Triple> =
            kg.triples.iter().copied().filter(|t| t.relation == rel).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, rel as u64));
        group.shuffle(&mut rng);
        let k = if group.len() > 1 {
            (((group.len() as f64) * holdout_frac).ceil() as usize).min(group.len() - 1)
        } else {
            0
        };
        heldout.extend_from_slice(&group[..k]);
        train.extend_from_slice(&group[k..]);
    }
    train.sort();
    heldout.sort();
    let train_kg = KnowledgeGraph {
        entities: kg.entities.clone(),
        relations: kg.relations.clone(),
        triples: train,
    };
    Ok((train_kg, heldout))
}
