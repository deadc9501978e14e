//! Translational knowledge-graph embeddings trained with a margin ranking
//! loss: minimize `max(0, margin + ||h + r - t|| - ||h' + r - t'||)` over
//! corrupted triples. Embeddings are left unconstrained; at toy scale the
//! margin hinge alone separates true triples from corruptions, and the
//! unit-norm projection used at web scale measurably hurts ranking here.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus_kg::graph::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use crate::numerics::mix_seed;
use crate::numerics::tensor::l2_norm;
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct KgEmbeddings {
    pub dim: usize,
    /// `[n_entities, dim]`
    pub entity: Tensor,
    /// `[n_relations, dim]`
    pub relation: Tensor,
}

impl KgEmbeddings {
    pub fn entity_vec(&self, id: usize) -> Result<&[f64]> {
        if id >= self.entity.rows() {
            return Err(Error::IndexOutOfRange(format!("entity {id}")));
        }
        Ok(self.entity.row(id))
    }

    pub fn relation_vec(&self, id: usize) -> Result<&[f64]> {
        if id >= self.relation.rows() {
            return Err(Error::IndexOutOfRange(format!("relation {id}")));
        }
        Ok(self.relation.row(id))
    }

    pub fn distance(&self, t: Triple) -> f64 {
        let h = self.entity.row(t.head);
        let r = self.relation.row(t.relation);
        let tt = self.entity.row(t.tail);
        let mut s = 0.0;
        for i in 0..self.dim {
            let d = h[i] + r[i] - tt[i];
            s += d * d;
        }
        s.sqrt()
    }
}

/// Margin ranking loss of one (true, corrupted) pair.
pub fn triple_margin_loss(emb: &KgEmbeddings, pos: Triple, neg: Triple, margin: f64) -> f64 {
    (margin + emb.distance(pos) - emb.distance(neg)).max(0.0)
}

pub struct KgTrainOutcome {
    pub embeddings: KgEmbeddings,
    /// Mean margin loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains translational embeddings by SGD over shuffled triples with one
/// random head-or-tail corruption per positive. Deterministic per seed.
pub fn train_kg_embeddings(
    kg: &KnowledgeGraph,
    dim: usize,
    epochs: usize,
    margin: f64,
    lr: f64,
    seed: u64,
) -> Result<KgTrainOutcome> {
    if kg.triples.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty triple set".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument("embedding dim must be >= 2".into()));
    }
    let n_e = kg.entities.len();
    let n_r = kg.relations.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    let bound = 6.0 / (dim as f64).sqrt();
    let mut entity: Vec<f64> = (0..n_e * dim).map(|_| rng.random_range(-bound..bound)).collect();
    let mut relation: Vec<f64> = (0..n_r * dim).map(|_| rng.random_range(-bound..bound)).collect();
    for r in relation.chunks_mut(dim) {
        normalize(r);
    }

    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..kg.triples.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1 + epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &ti in &order {
            let pos = kg.triples[ti];
            let neg = corrupt(pos, n_e, &mut rng);
            let (dp, up) = diff(&entity, &relation, dim, pos);
            let (dn, un) = diff(&entity, &relation, dim, neg);
            let loss = margin + dp - dn;
            if loss <= 0.0 {
                continue;
            }
            total += loss;
            // d||u||/du = u/||u||; descend the positive side, ascend the negative
            let gp: Vec<f64> = up.iter().map(|v| v / dp.max(1e-12)).collect();
            let gn: Vec<f64> = un.iter().map(|v| v / dn.max(1e-12)).collect();
            axpy(&mut entity[pos.head * dim..(pos.head + 1) * dim], -lr, &gp);
            axpy(&mut relation[pos.relation * dim..(pos.relation + 1) * dim], -lr, &gp);
            axpy(&mut entity[pos.tail * dim..(pos.tail + 1) * dim], lr, &gp);
            axpy(&mut entity[neg.head * dim..(neg.head + 1) * dim], lr, &gn);
            axpy(&mut relation[neg.relation * dim..(neg.relation + 1) * dim], lr, &gn);
            axpy(&mut entity[neg.tail * dim..(neg.tail + 1) * dim], -lr, &gn);
        }
        epoch_losses.push(total / kg.triples.len() as f64);
    }

    Ok(KgTrainOutcome {
        embeddings: KgEmbeddings {
            dim,
            entity: Tensor::new(n_e, dim, entity)?,
            relation: Tensor::new(n_r, dim, relation)?,
        },
        epoch_losses,
    })
}

/// Fraction of triples whose true distance beats a random corruption.
pub fn ranking_accuracy(kg: &KnowledgeGraph, emb: &KgEmbeddings, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_e = kg.entities.len();
    let hits = kg
        .triples
        .iter()
        .filter(|&&pos| {
            let neg = corrupt(pos, n_e, &mut rng);
            emb.distance(pos) < emb.distance(neg)
        })
        .count();
    hits as f64 / kg.triples.len() as f64
}

fn corrupt(pos: Triple, n_entities: usize, rng: &mut ChaCha8Rng) -> Triple {
    let corrupt_head = rng.random_bool(0.5);
    let original = if corrupt_head { pos.head } else { pos.tail };
    // uniform over entities minus the original
    let mut e = rng.random_range(0..n_entities - 1);
    if e >= original {
        e += 1;
    }
    if corrupt_head {
        Triple { head: e, ..pos }
    } else {
        Triple { tail: e, ..pos }
    }
}

fn diff(entity: &[f64], relation: &[f64], dim: usize, t: Triple) -> (f64, Vec<f64>) {
    let h = &entity[t.head * dim..(t.head + 1) * dim];
    let r = &relation[t.relation * dim..(t.relation + 1) * dim];
    let tt = &entity[t.tail * dim..(t.tail + 1) * dim];
    let u: Vec<f64> = (0..dim).map(|i| h[i] + r[i] - tt[i]).collect();
    (l2_norm(&u), u)
}

fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 1e-12 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, xv) in dst.iter_mut().zip(x) {
        *d += a * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_kg::graph::generate_kg;

    #[test]
    fn deterministic_per_seed() {
        let kg = generate_kg(7, 20, 3, 40).unwrap();
        let a = train_kg_embeddings(&kg, 8, 5, 1.0, 0.05, 3).unwrap();
        let b = train_kg_embeddings(&kg, 8, 5, 1.0, 0.05, 3).unwrap();
        assert!(a.embeddings.entity.bit_eq(&b.embeddings.entity));
        assert!(a.embeddings.relation.bit_eq(&b.embeddings.relation));
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn empty_triples_rejected() {
        let mut kg = generate_kg(7, 4, 2, 4).unwrap();
        kg.triples.clear();
        assert!(train_kg_embeddings(&kg, 8, 5, 1.0, 0.05, 3).is_err());
    }

    #[test]
    fn zero_margin_identical_pair_contributes_nothing() {
        let kg = generate_kg(7, 4, 2, 4).unwrap();
        let out = train_kg_embeddings(&kg, 8, 1, 1.0, 0.05, 3).unwrap();
        let t = kg.triples[0];
        assert_eq!(triple_margin_loss(&out.embeddings, t, t, 0.0), 0.0);
    }

    #[test]
    fn loss_trends_down() {
        let kg = generate_kg(7, 50, 5, 150).unwrap();
        let out = train_kg_embeddings(&kg, 16, 40, 1.0, 0.05, 3).unwrap();
        let first: f64 = out.epoch_losses[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = out.epoch_losses[out.epoch_losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "mean loss should fall: {first} -> {last}");
    }

    #[test]
    fn single_triple_distance_collapses() {
        let kg = KnowledgeGraph {
            entities: (0..2)
                .map(|id| crate::corpus_kg::graph::Entity { id, surface: format!("ent{id}") })
                .collect(),
            relations: vec![crate::corpus_kg::graph::Relation { id: 0, surface: "rel0".into() }],
            triples: vec![Triple { head: 0, relation: 0, tail: 1 }],
        };
        // the margin must exceed the initial corrupted distance or the
        // hinge closes before the true distance collapses
        let out = train_kg_embeddings(&kg, 4, 400, 5.0, 0.05, 5).unwrap();
        let d = out.embeddings.distance(kg.triples[0]);
        assert!(d < 0.1, "distance should collapse, got {d}");
    }

    #[test]
    fn ranking_accuracy_on_toy_graph() {
        let kg = generate_kg(7, 100, 8, 400).unwrap();
        let out = train_kg_embeddings(&kg, 32, 120, 1.0, 0.05, 3).unwrap();
        let acc = ranking_accuracy(&kg, &out.embeddings, 99);
        assert!(acc >= 0.9, "ranking accuracy {acc} below 0.9");
    }
}
