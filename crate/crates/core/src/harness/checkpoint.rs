//! Checkpoint and graph-embedding files, built on the binary container.

use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::corpus_kg::KgEmbeddings;
use crate::error::{Error, Result};
use crate::harness::config::Mode;
use crate::model::{Model, ModelParams, ParamLayout, TransformerConfig};
use crate::numerics::Tensor;

pub struct Checkpoint {
    pub model: Model,
    pub global_step: usize,
    pub mode: Mode,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    global_step: usize,
    mode: Mode,
) -> Result<()> {
    let mut c = Container::new(json!({
        "kind": "checkpoint",
        "format_version": 1,
        "config": serde_json::to_value(&model.cfg)?,
        "global_step": global_step,
        "mode": serde_json::to_value(mode)?,
    }));
    for ((name, _, _), tensor) in
        ParamLayout::new(&model.cfg).shapes().into_iter().zip(model.params.tensors())
    {
        c.push(name, tensor.clone());
    }
    c.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read_from(path)?;
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
        return Err(Error::CorruptFile("not a checkpoint file".into()));
    }
    let cfg: TransformerConfig = serde_json::from_value(
        c.meta.get("config").cloned().ok_or_else(|| Error::CorruptFile("missing config".into()))?,
    )
    .map_err(|e| Error::CorruptFile(format!("config: {e}")))?;
    cfg.validate()?;
    let global_step = c
        .meta
        .get("global_step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptFile("missing global_step".into()))? as usize;
    let mode: Mode = serde_json::from_value(
        c.meta.get("mode").cloned().ok_or_else(|| Error::CorruptFile("missing mode".into()))?,
    )
    .map_err(|e| Error::CorruptFile(format!("mode: {e}")))?;

    let mut tensors: Vec<Tensor> = Vec::new();
    for (name, rows, cols) in ParamLayout::new(&cfg).shapes() {
        let t = c.section(&name)?;
        if t.shape() != (rows, cols) {
            return Err(Error::CorruptFile(format!(
                "section '{name}' has shape {:?}, expected ({rows}, {cols})",
                t.shape()
            )));
        }
        tensors.push(t.clone());
    }
    Ok(Checkpoint {
        model: Model::new(cfg, ModelParams::from_tensors(tensors)),
        global_step,
        mode,
    })
}

pub fn save_kg_embeddings(path: &Path, emb: &KgEmbeddings) -> Result<()> {
    let mut c = Container::new(json!({
        "kind": "kg_embeddings",
        "format_version": 1,
        "dim": emb.dim,
    }));
    c.push("entity", emb.entity.clone());
    c.push("relation", emb.relation.clone());
    c.write_to(path)
}

pub fn load_kg_embeddings(path: &Path) -> Result<KgEmbeddings> {
    let c = Container::read_from(path)?;
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("kg_embeddings") {
        return Err(Error::CorruptFile("not a graph-embedding file".into()));
    }
    let dim = c
        .meta
        .get("dim")
        .and_then(|d| d.as_u64())
        .ok_or_else(|| Error::CorruptFile("missing dim".into()))? as usize;
    let entity = c.section("entity")?.clone();
    let relation = c.section("relation")?.clone();
    if entity.cols() != dim || relation.cols() != dim {
        return Err(Error::CorruptFile("embedding width does not match dim".into()));
    }
    Ok(KgEmbeddings { dim, entity, relation })
}
