//! Deterministic embedding space plus a similarity-threshold response cache.
//!
//! The embedding is a hashed character-trigram bag: each trigram of the
//! normalized text is hashed into one of 256 signed buckets, accumulated,
//! and L2-normalized. It is a dependency-free stand-in for a learned model;
//! cache semantics (max-cosine lookup against a threshold) are what matter
//! here, not embedding quality.

use serde::{Deserialize, Serialize};

use crate::model::fnv1a64;
use crate::time::{VirtualDuration, VirtualInstant};

pub const EMBED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Lowercase, strip punctuation to single spaces, collapse runs.
fn normalize(text: &str) -> Vec<char> {
    let mut out = Vec::with_capacity(text.len());
    let mut last_space = true;
    for c in text.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    while out.last() == Some(&' ') {
        out.pop();
    }
    out
}

/// Hashed-trigram embedding. Deterministic; unit norm whenever the text has
/// at least one trigram, the zero vector otherwise.
pub fn embed(text: &str) -> EmbeddingVector {
    let chars = normalize(text);
    let mut v = vec![0.0f64; EMBED_DIM];
    if chars.len() >= 3 {
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a64(&buf[..len]);
            let bucket = (h % EMBED_DIM as u64) as usize;
            // Independent sign bit from a second pass over the same bytes.
            let sign = if fnv1a64(&[&buf[..len], &[0x5a]].concat()) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            v[bucket] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    EmbeddingVector(v)
}

/// Inner product; for unit vectors this is the cosine similarity.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticEntry {
    pub query_text: String,
    pub embedding: EmbeddingVector,
    pub response: String,
    pub inserted_at: VirtualInstant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticCacheConfig {
    /// Similarity threshold for a hit, in (0, 1].
    pub threshold: f64,
    pub capacity_entries: usize,
    pub ttl: VirtualDuration,
}

impl Default for SemanticCacheConfig {
    fn default() -> Self {
        SemanticCacheConfig {
            threshold: 0.9,
            capacity_entries: 10_000,
            ttl: VirtualDuration::from_secs(600),
        }
    }
}

/// Response cache keyed by embedding similarity: a lookup hits when the best
/// cosine against any live entry reaches the threshold.
#[derive(Debug)]
pub struct SemanticCache {
    cfg: SemanticCacheConfig,
    /// Insertion order; front is oldest.
    entries: Vec<SemanticEntry>,
}

impl SemanticCache {
    pub fn new(cfg: SemanticCacheConfig) -> Self {
        assert!(cfg.threshold > 0.0 && cfg.threshold <= 1.0);
        assert!(cfg.capacity_entries >= 1);
        SemanticCache {
            cfg,
            entries: Vec::new(),
        }
    }

    pub fn config(&self) -> &SemanticCacheConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Best unexpired entry by cosine, if it reaches the threshold. Ties go
    /// to the earliest inserted entry.
    pub fn lookup(&self, query: &str, now: VirtualInstant) -> Option<(&SemanticEntry, f64)> {
        let q = embed(query);
        let mut best: Option<(&SemanticEntry, f64)> = None;
        for e in &self.entries {
            if now.since(e.inserted_at) > self.cfg.ttl {
                continue;
            }
            let sim = cosine(&q, &e.embedding);
            match &best {
                Some((_, b)) if sim <= *b => {}
                _ => {
                    // Strict improvement only: earlier entries keep ties.
                    if best.as_ref().is_none_or(|(_, b)| sim > *b) {
                        best = Some((e, sim));
                    }
                }
            }
        }
        best.filter(|(_, sim)| *sim >= self.cfg.threshold)
    }

    /// Stores a request/response pair. Re-inserting an identical query text
    /// replaces the old entry (one logical entry, refreshed). Capacity
    /// overflow evicts the oldest insertion.
    pub fn insert(&mut self, query: &str, response: &str, now: VirtualInstant) {
        if let Some(pos) = self.entries.iter().position(|e| e.query_text == query) {
            self.entries.remove(pos);
        }
        if self.entries.len() >= self.cfg.capacity_entries {
            self.entries.remove(0);
        }
        self.entries.push(SemanticEntry {
            query_text: query.to_string(),
            embedding: embed(query),
            response: response.to_string(),
            inserted_at: now,
        });
    }

    pub fn evict_expired(&mut self, now: VirtualInstant) -> usize {
        let before = self.entries.len();
        let ttl = self.cfg.ttl;
        self.entries.retain(|e| now.since(e.inserted_at) <= ttl);
        before - self.entries.len()
    }
}
