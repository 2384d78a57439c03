//! Block-granular prefix-sharing KV cache.
//!
//! Blocks are keyed by a chain hash of (parent chain hash, block tokens), so
//! two cached blocks coincide exactly when their full prefixes match, the
//! same sharing rule vLLM-style backends apply. Only whole blocks are cached;
//! matching proceeds from position zero and stops at the first absent or
//! expired block. Eviction is LRU over chain tails, which preserves the
//! prefix property (a cached block's parent is always cached).

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use crate::model::{TokenId, TokenSeq};
use crate::time::{VirtualDuration, VirtualInstant};

pub type UserId = u64;

/// Namespace sentinel for the shared (non-isolated) cache.
const SHARED_NAMESPACE: u64 = u64::MAX;

/// Key of one cached block: the chain hash of its full prefix plus the
/// namespace it lives in. Equal keys imply equal prefix chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockKey {
    pub chain_hash: u128,
    pub namespace: u64,
}

#[derive(Debug, Clone)]
struct CacheEntry {
    parent: Option<BlockKey>,
    last_access: VirtualInstant,
    inserted_at: VirtualInstant,
    #[allow(dead_code)]
    owner: UserId,
    depth: u32,
    child_count: u32,
    /// Collision guard, only carried in debug builds.
    #[cfg(debug_assertions)]
    tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PrefixCacheConfig {
    /// Tokens per block.
    pub block_size: usize,
    /// Capacity in tokens; resident usage never exceeds it.
    pub capacity_tokens: usize,
    pub ttl: VirtualDuration,
    /// Per-user namespaces instead of one shared cache.
    pub isolation: bool,
    /// Measure TTL from insertion instead of from last access.
    pub ttl_from_insert: bool,
}

impl Default for PrefixCacheConfig {
    fn default() -> Self {
        PrefixCacheConfig {
            block_size: 16,
            capacity_tokens: 250_000,
            ttl: VirtualDuration::from_secs(600),
            isolation: false,
            ttl_from_insert: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrefixCacheStats {
    pub resident_tokens: usize,
    pub insertions: u64,
    pub evictions: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug)]
pub struct PrefixCache {
    cfg: PrefixCacheConfig,
    entries: HashMap<BlockKey, CacheEntry>,
    /// Eviction order: (last access, deeper-first, key).
    lru: BTreeSet<(VirtualInstant, std::cmp::Reverse<u32>, BlockKey)>,
    stats: PrefixCacheStats,
}

fn chain_hash(parent: u128, tokens: &[TokenId]) -> u128 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    for t in tokens {
        h.update(t.0.to_le_bytes());
    }
    let digest = h.finalize();
    u128::from_le_bytes(digest[..16].try_into().unwrap())
}

impl PrefixCache {
    pub fn new(cfg: PrefixCacheConfig) -> Self {
        assert!(cfg.block_size >= 1);
        assert!(cfg.capacity_tokens >= cfg.block_size);
        PrefixCache {
            cfg,
            entries: HashMap::new(),
            lru: BTreeSet::new(),
            stats: PrefixCacheStats::default(),
        }
    }

    pub fn config(&self) -> &PrefixCacheConfig {
        &self.cfg
    }

    fn namespace(&self, user: UserId) -> u64 {
        if self.cfg.isolation {
            user
        } else {
            SHARED_NAMESPACE
        }
    }

    fn expired(&self, entry: &CacheEntry, now: VirtualInstant) -> bool {
        let basis = if self.cfg.ttl_from_insert {
            entry.inserted_at
        } else {
            entry.last_access
        };
        now.since(basis) > self.cfg.ttl
    }

    fn touch(&mut self, key: BlockKey, now: VirtualInstant) {
        if let Some(e) = self.entries.get_mut(&key) {
            self.lru.remove(&(e.last_access, std::cmp::Reverse(e.depth), key));
            e.last_access = now;
            self.lru.insert((now, std::cmp::Reverse(e.depth), key));
        }
    }

    fn remove_entry(&mut self, key: BlockKey) {
        if let Some(e) = self.entries.remove(&key) {
            self.lru.remove(&(e.last_access, std::cmp::Reverse(e.depth), key));
            if let Some(p) = e.parent {
                if let Some(pe) = self.entries.get_mut(&p) {
                    pe.child_count -= 1;
                }
            }
        }
    }

    /// Inserts all complete blocks of `seq`; partial trailing tokens are not
    /// cached. Existing blocks are refreshed. Returns newly inserted blocks.
    #[allow(clippy::map_entry)]
    pub fn insert_sequence(&mut self, seq: &TokenSeq, user: UserId, now: VirtualInstant) -> usize {
        let b = self.cfg.block_size;
        let ns = self.namespace(user);
        let complete = seq.len() / b;
        let mut parent_hash = 0u128;
        let mut parent_key: Option<BlockKey> = None;
        let mut inserted = 0usize;
        for i in 0..complete {
            let tokens = &seq.tokens[i * b..(i + 1) * b];
            let hash = chain_hash(parent_hash, tokens);
            let key = BlockKey {
                chain_hash: hash,
                namespace: ns,
            };
            if self.entries.contains_key(&key) {
                self.touch(key, now);
            } else {
                self.entries.insert(
                    key,
                    CacheEntry {
                        parent: parent_key,
                        last_access: now,
                        inserted_at: now,
                        owner: user,
                        depth: i as u32,
                        child_count: 0,
                        #[cfg(debug_assertions)]
                        tokens: tokens.to_vec(),
                    },
                );
                if let Some(p) = parent_key {
                    self.entries.get_mut(&p).unwrap().child_count += 1;
                }
                self.lru.insert((now, std::cmp::Reverse(i as u32), key));
                self.stats.insertions += 1;
                inserted += 1;
            }
            parent_hash = hash;
            parent_key = Some(key);
        }
        self.enforce_capacity();
        inserted
    }

    /// Longest cached prefix of `seq` in whole blocks: the largest `m` such
    /// that blocks `1..m` are all cached and unexpired at `now`. Matched
    /// blocks are refreshed.
    pub fn match_prefix(&mut self, seq: &TokenSeq, user: UserId, now: VirtualInstant) -> usize {
        let b = self.cfg.block_size;
        let ns = self.namespace(user);
        let complete = seq.len() / b;
        let mut parent_hash = 0u128;
        let mut matched = Vec::new();
        for i in 0..complete {
            let tokens = &seq.tokens[i * b..(i + 1) * b];
            let hash = chain_hash(parent_hash, tokens);
            let key = BlockKey {
                chain_hash: hash,
                namespace: ns,
            };
            match self.entries.get(&key) {
                Some(e) if !self.expired(e, now) => {
                    #[cfg(debug_assertions)]
                    debug_assert_eq!(e.tokens, tokens, "chain hash collision");
                    matched.push(key);
                }
                _ => break,
            }
            parent_hash = hash;
        }
        for key in &matched {
            self.touch(*key, now);
        }
        if matched.is_empty() {
            self.stats.misses += 1;
        } else {
            self.stats.hits += 1;
        }
        matched.len()
    }

    /// Removes every expired entry, cascading to suffix blocks so no chain
    /// is left orphaned. Returns the number of evicted blocks.
    pub fn evict_expired(&mut self, now: VirtualInstant) -> usize {
        let mut removed = 0usize;
        loop {
            let doomed: Vec<BlockKey> = self
                .entries
                .iter()
                .filter(|(_, e)| {
                    self.expired(e, now)
                        || e.parent.is_some_and(|p| !self.entries.contains_key(&p))
                })
                .map(|(k, _)| *k)
                .collect();
            if doomed.is_empty() {
                break;
            }
            for key in doomed {
                self.remove_entry(key);
                removed += 1;
            }
        }
        self.stats.evictions += removed as u64;
        removed
    }

    /// LRU eviction of chain tails until resident tokens fit the capacity.
    fn enforce_capacity(&mut self) {
        while self.resident_tokens() > self.cfg.capacity_tokens {
            // The globally least-recent entry is always a chain tail: parents
            // are touched whenever a descendant is, and ties order deeper
            // blocks first.
            let victim = self
                .lru
                .iter()
                .find(|(_, _, k)| self.entries[k].child_count == 0)
                .map(|(_, _, k)| *k);
            match victim {
                Some(key) => {
                    self.remove_entry(key);
                    self.stats.evictions += 1;
                }
                None => break,
            }
        }
    }

    pub fn resident_tokens(&self) -> usize {
        self.entries.len() * self.cfg.block_size
    }

    pub fn stats(&self) -> PrefixCacheStats {
        PrefixCacheStats {
            resident_tokens: self.resident_tokens(),
            ..self.stats
        }
    }
}
