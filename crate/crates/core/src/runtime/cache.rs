//! Level-partitioned key/value cache and the token-sparse forward pass.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::latents::TokenMatrix;
use crate::scheduler::Level;

use super::model::{attention, KvSegment, ToyDiT};

const NO_ROW: u32 = u32::MAX;

/// Cached keys and values of the tokens assigned to one level.
#[derive(Debug, Clone, Default)]
struct LevelCache {
    token_ids: Vec<usize>,
    /// `row_of[token]` is the token's row, or `NO_ROW`.
    row_of: Vec<u32>,
    filled: Vec<bool>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    last_refresh: Option<usize>,
}

/// Per-layer, per-level stored keys and values for frozen tokens.
///
/// Only levels 1 and 2 are cached; level-3 tokens are recomputed on every
/// step. A token belongs to at most one level.
#[derive(Debug, Clone)]
pub struct KVCacheStore {
    layers: usize,
    d_model: usize,
    num_tokens: usize,
    /// Index 0 holds level 1, index 1 holds level 2.
    levels: [LevelCache; 2],
}

fn slot(level: Level) -> Option<usize> {
    match level {
        Level::Static => Some(0),
        Level::Moderate => Some(1),
        Level::Active => None,
    }
}

impl KVCacheStore {
    pub fn new(layers: usize, d_model: usize, num_tokens: usize) -> Self {
        Self {
            layers,
            d_model,
            num_tokens,
            levels: Default::default(),
        }
    }

    pub fn for_model(model: &ToyDiT, num_tokens: usize) -> Self {
        Self::new(model.layers().len(), model.d_model(), num_tokens)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Replaces the level assignment. Storage for each level is reserved
    /// exactly (`rows * d_model` floats for keys and for values per layer);
    /// rows stay unusable until a forward pass fills them.
    pub fn assign(&mut self, token_levels: &[Level]) -> Result<()> {
        if token_levels.len() != self.num_tokens {
            return Err(invalid(format!(
                "level assignment covers {} tokens, cache holds {}",
                token_levels.len(),
                self.num_tokens
            )));
        }
        for (s, level) in [Level::Static, Level::Moderate].into_iter().enumerate() {
            let ids: Vec<usize> = (0..self.num_tokens).filter(|&i| token_levels[i] == level).collect();
            self.levels[s] = self.build_level(ids);
        }
        Ok(())
    }

    fn build_level(&self, token_ids: Vec<usize>) -> LevelCache {
        if token_ids.is_empty() {
            return LevelCache::default();
        }
        let mut row_of = vec![NO_ROW; self.num_tokens];
        for (r, &t) in token_ids.iter().enumerate() {
            row_of[t] = r as u32;
        }
        let n = token_ids.len() * self.d_model;
        let alloc = || {
            let mut v = Vec::with_capacity(n);
            v.resize(n, 0.0f32);
            v
        };
        LevelCache {
            filled: vec![false; token_ids.len()],
            keys: (0..self.layers).map(|_| alloc()).collect(),
            values: (0..self.layers).map(|_| alloc()).collect(),
            token_ids,
            row_of,
            last_refresh: None,
        }
    }

    pub fn clear(&mut self) {
        self.levels = Default::default();
    }

    /// Level currently caching `token`, if any.
    pub fn level_of(&self, token: usize) -> Option<Level> {
        [Level::Static, Level::Moderate]
            .into_iter()
            .zip(&self.levels)
            .find(|(_, c)| c.row_of.get(token).is_some_and(|&r| r != NO_ROW))
            .map(|(l, _)| l)
    }

    pub fn token_ids(&self, level: Level) -> &[usize] {
        slot(level).map_or(&[], |s| &self.levels[s].token_ids)
    }

    pub fn rows(&self, level: Level) -> usize {
        self.token_ids(level).len()
    }

    pub fn last_refresh(&self, level: Level) -> Option<usize> {
        slot(level).and_then(|s| self.levels[s].last_refresh)
    }

    /// Records that a level's rows were recomputed on `step`.
    pub fn mark_refresh(&mut self, level: Level, step: usize) {
        if let Some(s) = slot(level) {
            self.levels[s].last_refresh = Some(step);
        }
    }

    /// Stored key and value rows of a cached token at `layer`.
    pub fn cached_kv(&self, layer: usize, token: usize) -> Option<(&[f32], &[f32])> {
        let d = self.d_model;
        self.levels.iter().find_map(|c| {
            let r = *c.row_of.get(token)?;
            if r == NO_ROW || !c.filled[r as usize] {
                return None;
            }
            let r = r as usize;
            Some((&c.keys[layer][r * d..(r + 1) * d], &c.values[layer][r * d..(r + 1) * d]))
        })
    }

    /// Bytes held by key/value rows, per layer and level.
    pub fn payload_bytes(&self, layer: usize, level: Level) -> usize {
        slot(level).map_or(0, |s| {
            let c = &self.levels[s];
            if c.keys.is_empty() {
                0
            } else {
                (c.keys[layer].capacity() + c.values[layer].capacity()) * std::mem::size_of::<f32>()
            }
        })
    }

    pub fn total_payload_bytes(&self) -> usize {
        (0..self.layers)
            .map(|l| self.payload_bytes(l, Level::Static) + self.payload_bytes(l, Level::Moderate))
            .sum()
    }
}

/// Runs the model on `active_ids` only.
///
/// Per layer, keys and values are the concatenation of the active tokens'
/// fresh projections, then the level-2 cache, then the level-1 cache,
/// without any reordering. Active tokens that own a cache row have that row
/// overwritten with their fresh projections before attention, and are left
/// out of the cached segments.
pub fn masked_forward(
    model: &ToyDiT,
    active_tokens: &TokenMatrix,
    active_ids: &[usize],
    cache: &mut KVCacheStore,
    t: f64,
) -> Result<TokenMatrix> {
    let n = cache.num_tokens;
    if active_tokens.rows != active_ids.len() {
        return Err(invalid("active token rows do not match the id list"));
    }
    if cache.layers != model.layers().len() || cache.d_model != model.d_model() {
        return Err(invalid("cache shape does not match the model"));
    }
    model.check_input(active_tokens)?;
    let mut is_active = vec![false; n];
    for &id in active_ids {
        if id >= n {
            return Err(invalid(format!("active id {id} out of range for {n} tokens")));
        }
        if std::mem::replace(&mut is_active[id], true) {
            return Err(invalid(format!("active id {id} listed twice")));
        }
    }
    for (tok, active) in is_active.iter().enumerate() {
        if *active {
            continue;
        }
        match cache.levels.iter().find_map(|c| c.row_of.get(tok).filter(|&&r| r != NO_ROW).map(|&r| (c, r))) {
            None => {
                return Err(Error::InvalidState(format!("token {tok} is neither active nor cached")));
            }
            Some((c, r)) if !c.filled[r as usize] => {
                return Err(Error::InvalidState(format!("token {tok} has an empty cache row")));
            }
            _ => {}
        }
    }
    if active_ids.is_empty() {
        return Ok(TokenMatrix::zeros(0, model.channels));
    }

    // Frozen rows per level, in cache order.
    let frozen: Vec<Vec<u32>> = cache
        .levels
        .iter()
        .map(|c| {
            c.token_ids
                .iter()
                .enumerate()
                .filter(|(_, &t)| !is_active[t])
                .map(|(r, _)| r as u32)
                .collect()
        })
        .collect();
    let refreshed: Vec<Vec<(usize, usize)>> = cache
        .levels
        .iter()
        .map(|c| {
            active_ids
                .iter()
                .enumerate()
                .filter_map(|(i, &t)| c.row_of.get(t).filter(|&&r| r != NO_ROW).map(|&r| (i, r as usize)))
                .collect()
        })
        .collect();

    let d = model.d_model();
    let mut h = model.embed(active_tokens, t);
    for (l, layer) in model.layers().iter().enumerate() {
        let qkv = layer.norm_qkv(&h);
        for (s, rows) in refreshed.iter().enumerate() {
            let c = &mut cache.levels[s];
            for &(i, r) in rows {
                c.keys[l][r * d..(r + 1) * d].copy_from_slice(qkv.k.row(i));
                c.values[l][r * d..(r + 1) * d].copy_from_slice(qkv.v.row(i));
            }
        }
        let mut segments = vec![KvSegment::dense(&qkv.k.data, &qkv.v.data)];
        for s in [1, 0] {
            let c = &cache.levels[s];
            if frozen[s].is_empty() {
                continue;
            }
            let rows = if frozen[s].len() == c.token_ids.len() { None } else { Some(frozen[s].as_slice()) };
            segments.push(KvSegment { keys: &c.keys[l], values: &c.values[l], rows });
        }
        let a = attention(&qkv.q, &segments, model.heads());
        h = layer.output(&h, &a);
    }
    for (s, rows) in refreshed.iter().enumerate() {
        for &(_, r) in rows {
            cache.levels[s].filled[r] = true;
        }
    }
    let out = model.head(&h);
    if !out.all_finite() {
        return Err(Error::Numeric { step: 0, detail: "non-finite model output".into() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryRow {
    pub layer: usize,
    pub level: u8,
    pub rows: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
    pub total_bytes: u64,
    /// Keys and values for every token at every layer.
    pub full_sequence_bytes: u64,
    pub fraction_of_full: f64,
}

/// `rows * d_model * 2 * 4` bytes per layer and level.
pub fn cache_memory_report(cache: &KVCacheStore) -> MemoryReport {
    let per_row = (cache.d_model * 2 * std::mem::size_of::<f32>()) as u64;
    let mut rows = Vec::new();
    for layer in 0..cache.layers {
        for level in [Level::Static, Level::Moderate] {
            let r = cache.rows(level);
            rows.push(MemoryRow {
                layer,
                level: level.as_u8(),
                rows: r,
                bytes: r as u64 * per_row,
            });
        }
    }
    let total_bytes = rows.iter().map(|r| r.bytes).sum();
    let full_sequence_bytes = cache.num_tokens as u64 * per_row * cache.layers as u64;
    MemoryReport {
        rows,
        total_bytes,
        full_sequence_bytes,
        fraction_of_full: if full_sequence_bytes == 0 { 0.0 } else { total_bytes as f64 / full_sequence_bytes as f64 },
    }
}
