//! Knowledge-augmented memory bank: per-entity local memory (windowed
//! context mean maintained by a moving average), global memory (running
//! mean of classification-token outputs), the decaying mixing coefficient,
//! and input mixing.
//!
//! The bank holds an entry for every entity that has been an injection
//! target at least once; the first observed local window initializes the
//! local memory (standing in for pre-trained-embedding initialization,
//! which is out of scope at toy scale).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub entity_id: usize,
    /// Moving-average of windowed context means.
    pub local: Vec<f64>,
    /// Running mean of classification-token outputs, over exactly
    /// `global_count` contexts.
    pub global: Vec<f64>,
    pub global_count: u64,
    pub initialized: bool,
}

impl MemoryEntry {
    pub fn new(entity_id: usize, dim: usize) -> Self {
        Self {
            entity_id,
            local: vec![0.0; dim],
            global: vec![0.0; dim],
            global_count: 0,
            initialized: false,
        }
    }

    /// Ready to serve Eq.-style mixing: both memories have been fed.
    pub fn ready(&self) -> bool {
        self.initialized && self.global_count > 0
    }
}

/// Decay schedule for the mixing coefficient: `lambda_q = lambda0 / beta^q`
/// with `q` counting completed corpus passes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub lambda0: f64,
    pub beta: f64,
}

impl MixSchedule {
    pub fn new(lambda0: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda0) {
            return Err(Error::InvalidConfig(format!("lambda0 must be in [0,1], got {lambda0}")));
        }
        if beta < 1.0 {
            return Err(Error::InvalidConfig(format!("beta must be >= 1, got {beta}")));
        }
        Ok(Self { lambda0, beta })
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.lambda0 / self.beta.powi(epoch as i32)
    }
}

/// Windowed mean of final-layer outputs around a span: positions
/// `max(0, l-k) ..= min(n-1, r+k)` of `hidden` (`[n, d]`, sentence rows).
///
/// By default the normalizer is the count of positions actually summed (a
/// true mean, also correct under boundary clipping). With
/// `literal_normalizer` the sum is divided by `2k + r - l` instead,
/// reproducing the written formula; that normalizer is zero for a
/// single-token span with `k = 0`, which is rejected.
pub fn local_memory(
    hidden: &Tensor,
    span: (usize, usize),
    k: usize,
    literal_normalizer: bool,
) -> Result<Vec<f64>> {
    let (l, r) = span;
    let n = hidden.rows();
    if l > r || r >= n {
        return Err(Error::IndexOutOfRange(format!("span ({l},{r}) in {n}-row hidden")));
    }
    let lo = l.saturating_sub(k);
    let hi = (r + k).min(n - 1);
    let d = hidden.cols();
    let mut sum = vec![0.0; d];
    for p in lo..=hi {
        for (s, v) in sum.iter_mut().zip(hidden.row(p)) {
            *s += v;
        }
    }
    let normalizer = if literal_normalizer {
        let lit = 2 * k + r - l;
        if lit == 0 {
            return Err(Error::InvalidArgument(
                "literal normalizer 2k + r - l is zero for this span".into(),
            ));
        }
        lit as f64
    } else {
        (hi - lo + 1) as f64
    };
    for s in sum.iter_mut() {
        *s /= normalizer;
    }
    Ok(sum)
}

/// Moving-average update of the local memory:
/// `local <- (1-gamma) * local + gamma * observed`; the first observation
/// initializes the memory directly.
pub fn update_local(entry: &mut MemoryEntry, observed: &[f64], gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) || gamma == 0.0 {
        return Err(Error::InvalidArgument(format!("gamma must be in (0,1), got {gamma}")));
    }
    if observed.len() != entry.local.len() {
        return Err(Error::shape("update_local", "observed width != memory width"));
    }
    if !observed.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "update_local" });
    }
    if !entry.initialized {
        entry.local.copy_from_slice(observed);
        entry.initialized = true;
    } else {
        // written as m + gamma (o - m) so an observation equal to the
        // memory is bitwise a fixed point
        for (m, o) in entry.local.iter_mut().zip(observed) {
            *m += gamma * (o - *m);
        }
    }
    Ok(())
}

/// Streaming mean update of the global memory:
/// `global <- (global * count + cls) / (count + 1)`.
pub fn update_global(entry: &mut MemoryEntry, cls: &[f64]) -> Result<()> {
    if cls.len() != entry.global.len() {
        return Err(Error::shape("update_global", "cls width != memory width"));
    }
    if !cls.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "update_global" });
    }
    let c = entry.global_count as f64;
    for (g, v) in entry.global.iter_mut().zip(cls) {
        *g = (*g * c + v) / (c + 1.0);
    }
    entry.global_count += 1;
    Ok(())
}

/// Which branch produced a mixed input row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixSource {
    /// `(1-lambda) * h_e + lambda/2 * (local + global)`
    Injected,
    /// Entry missing or not yet fed: fell back to the bare injection
    /// embedding (lambda treated as zero for this entity).
    InjectionOnly,
    /// No injection at this position: the plain token embedding.
    TokenEmbedding,
}

/// Input-mixing rule for one position. Pure read; never touches the bank.
pub fn mixed_input(
    token_embedding: &[f64],
    h_e: Option<&[f64]>,
    entry: Option<&MemoryEntry>,
    lambda: f64,
) -> Result<(Vec<f64>, MixSource)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must be in [0,1], got {lambda}")));
    }
    let Some(h_e) = h_e else {
        return Ok((token_embedding.to_vec(), MixSource::TokenEmbedding));
    };
    match entry {
        Some(e) if e.ready() => {
            let out = h_e
                .iter()
                .zip(e.local.iter().zip(&e.global))
                .map(|(he, (lm, gm))| (1.0 - lambda) * he + lambda / 2.0 * (lm + gm))
                .collect();
            Ok((out, MixSource::Injected))
        }
        _ => {
            log::debug!("memory entry not ready; injecting without memory mix");
            Ok((h_e.to_vec(), MixSource::InjectionOnly))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBank {
    pub dim: usize,
    pub entries: BTreeMap<usize, MemoryEntry>,
}

impl MemoryBank {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn entry_mut(&mut self, entity_id: usize) -> &mut MemoryEntry {
        let dim = self.dim;
        self.entries.entry(entity_id).or_insert_with(|| MemoryEntry::new(entity_id, dim))
    }

    pub fn get(&self, entity_id: usize) -> Option<&MemoryEntry> {
        self.entries.get(&entity_id)
    }

    /// FNV-1a digest over the full bank state; lets tests pin down that
    /// read paths really are reads.
    pub fn state_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for (id, e) in &self.entries {
            eat(&id.to_le_bytes());
            eat(&e.global_count.to_le_bytes());
            eat(&[e.initialized as u8]);
            for v in e.local.iter().chain(&e.global) {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct EntryMeta {
            entity_id: usize,
            global_count: u64,
            initialized: bool,
        }
        let metas: Vec<EntryMeta> = self
            .entries
            .values()
            .map(|e| EntryMeta {
                entity_id: e.entity_id,
                global_count: e.global_count,
                initialized: e.initialized,
            })
            .collect();
        let mut c = Container::new(json!({
            "kind": "memory_bank",
            "dim": self.dim,
            "entries": serde_json::to_value(&metas)?,
        }));
        let n = self.entries.len();
        let mut local = Vec::with_capacity(n * self.dim);
        let mut global = Vec::with_capacity(n * self.dim);
        for e in self.entries.values() {
            local.extend_from_slice(&e.local);
            global.extend_from_slice(&e.global);
        }
        c.push("local", Tensor::from_raw(n, self.dim, local));
        c.push("global", Tensor::from_raw(n, self.dim, global));
        c.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct EntryMeta {
            entity_id: usize,
            global_count: u64,
            initialized: bool,
        }
        let c = Container::read_from(path)?;
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("memory_bank") {
            return Err(Error::CorruptFile("not a memory bank file".into()));
        }
        let dim = c
            .meta
            .get("dim")
            .and_then(|d| d.as_u64())
            .ok_or_else(|| Error::CorruptFile("missing dim".into()))? as usize;
        let metas: Vec<EntryMeta> = serde_json::from_value(
            c.meta.get("entries").cloned().ok_or_else(|| Error::CorruptFile("missing entries".into()))?,
        )
        .map_err(|e| Error::CorruptFile(format!("entries: {e}")))?;
        let local = c.section("local")?;
        let global = c.section("global")?;
        if local.shape() != (metas.len(), dim) || global.shape() != (metas.len(), dim) {
            return Err(Error::CorruptFile("memory sections do not match entry metadata".into()));
        }
        let mut bank = MemoryBank::new(dim);
        for (i, m) in metas.into_iter().enumerate() {
            bank.entries.insert(
                m.entity_id,
                MemoryEntry {
                    entity_id: m.entity_id,
                    local: local.row(i).to_vec(),
                    global: global.row(i).to_vec(),
                    global_count: m.global_count,
                    initialized: m.initialized,
                },
            );
        }
        Ok(bank)
    }

    pub fn bit_eq(&self, other: &MemoryBank) -> bool {
        self.dim == other.dim && self.state_hash() == other.state_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn local_memory_examples() {
        // k = 0, single-token span: exactly that hidden row
        let h = Tensor::new(4, 2, vec![1.0, 0.0, 3.0, 0.0, 2.0, 0.0, 9.0, 9.0]).unwrap();
        assert_eq!(local_memory(&h, (2, 2), 0, false).unwrap(), vec![2.0, 0.0]);
        // k = 1 around span (1,1) over rows 0..=2
        assert_eq!(local_memory(&h, (1, 1), 1, false).unwrap(), vec![2.0, 0.0]);
        // clipped window at the sequence start
        let m = local_memory(&h, (0, 1), 4, false).unwrap();
        let brute: Vec<f64> = (0..2)
            .map(|c| (0..4).map(|r| h.at(r, c)).sum::<f64>() / 4.0)
            .collect();
        assert_eq!(m, brute);
        // invalid span
        assert!(local_memory(&h, (3, 5), 0, false).is_err());
    }

    #[test]
    fn literal_normalizer_divides_by_written_formula() {
        let h = Tensor::new(3, 1, vec![1.0, 3.0, 2.0]).unwrap();
        // k=1, span (1,1): sum 6 over 3 rows; literal normalizer 2*1+0 = 2
        assert_eq!(local_memory(&h, (1, 1), 1, true).unwrap(), vec![3.0]);
        assert_eq!(local_memory(&h, (1, 1), 1, false).unwrap(), vec![2.0]);
        // k=0 single-token span: literal normalizer is zero
        assert!(local_memory(&h, (1, 1), 0, true).is_err());
    }

    #[test]
    fn update_local_examples() {
        let mut e = MemoryEntry::new(0, 2);
        update_local(&mut e, &[1.0, 1.0], 0.1).unwrap();
        assert!(e.initialized);
        assert_eq!(e.local, vec![1.0, 1.0]);
        update_local(&mut e, &[2.0, 0.0], 0.1).unwrap();
        assert!((e.local[0] - 1.1).abs() < 1e-15);
        assert!((e.local[1] - 0.9).abs() < 1e-15);
        // fixed point
        let before = e.local.clone();
        update_local(&mut e, &before.clone(), 0.37).unwrap();
        assert_eq!(e.local, before);
        // invalid gamma and non-finite observation
        assert!(update_local(&mut e, &[0.0, 0.0], 0.0).is_err());
        assert!(update_local(&mut e, &[f64::NAN, 0.0], 0.1).is_err());
    }

    #[test]
    fn repeated_updates_converge_geometrically() {
        let gamma = 0.1;
        let target = [2.0, -1.0];
        let mut e = MemoryEntry::new(0, 2);
        update_local(&mut e, &[10.0, 10.0], gamma).unwrap();
        let start = e.local.clone();
        for _ in 0..100 {
            update_local(&mut e, &target, gamma).unwrap();
        }
        let bound = (1.0f64 - gamma).powi(100)
            * start.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let dist = e
            .local
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= bound + 1e-12, "dist {dist} > bound {bound}");
    }

    #[test]
    fn moving_average_closed_form() {
        // local after t updates = (1-g)^t m0 + g * sum (1-g)^(t-j) o_j
        let gamma = 0.3;
        let mut e = MemoryEntry::new(0, 1);
        update_local(&mut e, &[0.5], gamma).unwrap(); // m0 via first-observation init
        let m0 = e.local[0];
        let obs = [0.9, -0.4, 0.2, 1.5, 0.0, -1.1];
        for o in obs {
            update_local(&mut e, &[o], gamma).unwrap();
        }
        let t = obs.len() as i32;
        let mut expect = (1.0f64 - gamma).powi(t) * m0;
        for (j, o) in obs.iter().enumerate() {
            expect += gamma * (1.0f64 - gamma).powi(t - 1 - j as i32) * o;
        }
        assert!((e.local[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn update_global_examples() {
        let mut e = MemoryEntry::new(0, 2);
        update_global(&mut e, &[1.0, 1.0]).unwrap();
        assert_eq!(e.global, vec![1.0, 1.0]);
        assert_eq!(e.global_count, 1);
        update_global(&mut e, &[3.0, 3.0]).unwrap();
        assert_eq!(e.global, vec![2.0, 2.0]);
        assert_eq!(e.global_count, 2);
    }

    proptest! {
        #[test]
        fn streaming_global_mean_equals_batch_mean(
            all in proptest::collection::vec(
                proptest::collection::vec(-10.0f64..10.0, 3), 1..60)
        ) {
            let mut e = MemoryEntry::new(0, 3);
            for v in &all {
                update_global(&mut e, v).unwrap();
            }
            for c in 0..3 {
                let batch: f64 = all.iter().map(|v| v[c]).sum::<f64>() / all.len() as f64;
                prop_assert!((e.global[c] - batch).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lambda_schedule_values() {
        let s = MixSchedule::new(0.5, 2.0).unwrap();
        assert_eq!(s.at(0), 0.5);
        assert_eq!(s.at(3), 0.0625);
        let flat = MixSchedule::new(0.5, 1.0).unwrap();
        for q in 0..20 {
            assert_eq!(flat.at(q), 0.5);
        }
        // monotone non-increasing, limit zero for beta > 1
        let mut prev = f64::INFINITY;
        for q in 0..60 {
            let l = s.at(q);
            assert!(l <= prev);
            prev = l;
        }
        assert!(s.at(200) < 1e-12);
        assert!(MixSchedule::new(0.5, 0.5).is_err());
        assert!(MixSchedule::new(1.5, 2.0).is_err());
    }

    #[test]
    fn mixed_input_endpoints() {
        let mut e = MemoryEntry::new(0, 2);
        update_local(&mut e, &[0.0, 2.0], 0.1).unwrap();
        update_global(&mut e, &[0.0, 0.0]).unwrap();
        let he = [2.0, 0.0];
        let tok = [9.0, 9.0];
        // lambda = 0 -> pure injection embedding
        let (v, src) = mixed_input(&tok, Some(&he), Some(&e), 0.0).unwrap();
        assert_eq!(v, vec![2.0, 0.0]);
        assert_eq!(src, MixSource::Injected);
        // lambda = 1 -> memory average
        let (v, _) = mixed_input(&tok, Some(&he), Some(&e), 1.0).unwrap();
        assert_eq!(v, vec![0.0, 1.0]);
        // lambda = 0.5 -> arithmetic blend
        let (v, _) = mixed_input(&tok, Some(&he), Some(&e), 0.5).unwrap();
        assert_eq!(v, vec![1.0, 0.5]);
        // no target -> token embedding
        let (v, src) = mixed_input(&tok, None, Some(&e), 0.5).unwrap();
        assert_eq!(v, tok.to_vec());
        assert_eq!(src, MixSource::TokenEmbedding);
        // uninitialized entry -> bare injection embedding
        let empty = MemoryEntry::new(1, 2);
        let (v, src) = mixed_input(&tok, Some(&he), Some(&empty), 0.5).unwrap();
        assert_eq!(v, he.to_vec());
        assert_eq!(src, MixSource::InjectionOnly);
        assert!(mixed_input(&tok, Some(&he), Some(&e), 1.5).is_err());
    }

    #[test]
    fn mixed_input_is_a_pure_read() {
        let mut bank = MemoryBank::new(2);
        let e = bank.entry_mut(3);
        update_local(e, &[1.0, 2.0], 0.1).unwrap();
        update_global(e, &[0.5, 0.5]).unwrap();
        let before = bank.state_hash();
        for lambda in [0.0, 0.25, 1.0] {
            let _ = mixed_input(&[1.0, 1.0], Some(&[2.0, 2.0]), bank.get(3), lambda).unwrap();
        }
        assert_eq!(bank.state_hash(), before);
    }

    #[test]
    fn persist_load_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let mut bank = MemoryBank::new(4);
        for id in 0..100 {
            let e = bank.entry_mut(id);
            update_local(e, &[id as f64, 0.1, -0.5, 1e-17], 0.1).unwrap();
            update_global(e, &[0.25, id as f64, 0.0, -0.0]).unwrap();
        }
        bank.persist(&path).unwrap();
        let back = MemoryBank::load(&path).unwrap();
        assert!(bank.bit_eq(&back));
        assert_eq!(bank.entries, back.entries);
    }

    #[test]
    fn truncated_bank_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let mut bank = MemoryBank::new(8);
        for id in 0..50 {
            update_global(bank.entry_mut(id), &[1.0; 8]).unwrap();
        }
        bank.persist(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(MemoryBank::load(&path).is_err());
    }

    #[test]
    fn file_size_grows_linearly_with_entities() {
        let dir = tempfile::tempdir().unwrap();
        let mut sizes = Vec::new();
        for n in [10usize, 100, 1000] {
            let path = dir.path().join(format!("bank{n}.bin"));
            let mut bank = MemoryBank::new(16);
            for id in 0..n {
                update_global(bank.entry_mut(id), &[0.5; 16]).unwrap();
            }
            bank.persist(&path).unwrap();
            sizes.push(std::fs::metadata(&path).unwrap().len() as f64);
        }
        let step1 = sizes[1] - sizes[0];
        let step2 = sizes[2] - sizes[1];
        let ratio = step2 / step1;
        assert!((8.0..12.0).contains(&ratio), "growth ratio {ratio} not ~10");
    }
}
