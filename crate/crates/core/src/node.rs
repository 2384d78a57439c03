//! The victim: a simulated inference endpoint.
//!
//! `submit` runs the full request pipeline: rate limiting, semantic lookup,
//! prefix matching, synthetic prefill/decode timing, cache insertion, and
//! the configured defenses. The attacker-visible surface of an outcome is
//! exactly {ttft, token times, response text, RateLimited}; cache ground
//! truth is quarantined behind [`ServingNode::debug_truth`], which only
//! works on nodes built in test mode.

use std::collections::{HashMap, VecDeque};

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{tokenize, TokenSeq};
use crate::prefix_cache::{PrefixCache, PrefixCacheConfig, PrefixCacheStats, UserId};
use crate::semantic_cache::{SemanticCache, SemanticCacheConfig};
use crate::time::{VirtualDuration, VirtualInstant};
use crate::timing::{decode_time, prefill_time, prefill_time_exact, semantic_hit_time, TimingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Prefix,
    Semantic,
    Both,
}

impl CacheMode {
    fn prefix_enabled(self) -> bool {
        matches!(self, CacheMode::Prefix | CacheMode::Both)
    }

    fn semantic_enabled(self) -> bool {
        matches!(self, CacheMode::Semantic | CacheMode::Both)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    /// Per-user cache namespaces.
    pub isolation: bool,
    /// Adds |Normal(0, sigma)| seconds to every response when > 0.
    pub delay_injection_sigma: f64,
    /// Report the zero-hit prefill time for every request, noise-free.
    pub constant_time: bool,
    /// When false, per-token times are withheld; only total latency is
    /// observable.
    pub streaming: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            isolation: false,
            delay_injection_sigma: 0.0,
            constant_time: false,
            streaming: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub cache_mode: CacheMode,
    pub prefix: PrefixCacheConfig,
    pub semantic: SemanticCacheConfig,
    pub timing: TimingParams,
    pub rate_limit_rpm: u32,
    pub defenses: DefenseConfig,
    /// Enables the ground-truth accessor. Leave off for attack-realistic
    /// nodes.
    pub debug_enabled: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            cache_mode: CacheMode::Prefix,
            prefix: PrefixCacheConfig::default(),
            semantic: SemanticCacheConfig::default(),
            timing: TimingParams::default(),
            rate_limit_rpm: 5_000,
            defenses: DefenseConfig::default(),
            debug_enabled: false,
        }
    }
}

/// Cache state at service time, exposed only through `debug_truth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DebugInfo {
    pub k_blocks: usize,
    pub semantic_hit: bool,
}

#[derive(Debug, Clone)]
pub struct RequestOutcome {
    /// Time to first token. With streaming disabled this equals the total
    /// latency (nothing earlier is observable).
    pub ttft_s: f64,
    /// Completion offset of each generated token; empty when streaming is
    /// off or a semantic hit returned the response whole.
    pub token_times_s: Vec<f64>,
    pub response_text: String,
    pub total_latency_s: f64,
    debug: DebugInfo,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmitError {
    #[error("rate limit exceeded for user")]
    RateLimited,
    #[error("gen_tokens must be >= 1")]
    InvalidGenTokens,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DebugError {
    #[error("debug channel disabled on this node")]
    DebugDisabled,
}

const RATE_WINDOW: VirtualDuration = VirtualDuration(60_000_000_000);

#[derive(Debug)]
pub struct ServingNode {
    cfg: NodeConfig,
    prefix: Option<PrefixCache>,
    semantic: Option<SemanticCache>,
    now: VirtualInstant,
    rate_windows: HashMap<UserId, VecDeque<VirtualInstant>>,
    rate_rejections: u64,
}

impl ServingNode {
    pub fn new(mut cfg: NodeConfig) -> Self {
        assert!(cfg.rate_limit_rpm >= 1);
        cfg.prefix.isolation = cfg.prefix.isolation || cfg.defenses.isolation;
        let prefix = cfg
            .cache_mode
            .prefix_enabled()
            .then(|| PrefixCache::new(cfg.prefix.clone()));
        let semantic = cfg
            .cache_mode
            .semantic_enabled()
            .then(|| SemanticCache::new(cfg.semantic.clone()));
        ServingNode {
            cfg,
            prefix,
            semantic,
            now: VirtualInstant::EPOCH,
            rate_windows: HashMap::new(),
            rate_rejections: 0,
        }
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn now(&self) -> VirtualInstant {
        self.now
    }

    pub fn block_size(&self) -> usize {
        self.cfg.prefix.block_size
    }

    /// Moves the node clock forward and expires stale cache entries.
    pub fn advance_clock(&mut self, delta: VirtualDuration) {
        self.now += delta;
        let now = self.now;
        if let Some(p) = self.prefix.as_mut() {
            p.evict_expired(now);
        }
        if let Some(s) = self.semantic.as_mut() {
            s.evict_expired(now);
        }
    }

    fn check_rate_limit(&mut self, user: UserId, now: VirtualInstant) -> Result<(), SubmitError> {
        let window = self.rate_windows.entry(user).or_default();
        while window.front().is_some_and(|t| now.since(*t) >= RATE_WINDOW) {
            window.pop_front();
        }
        if window.len() >= self.cfg.rate_limit_rpm as usize {
            self.rate_rejections += 1;
            return Err(SubmitError::RateLimited);
        }
        window.push_back(now);
        Ok(())
    }

    /// Serves one request at virtual time `now` (which must not precede the
    /// node clock). Rejected requests leave every cache untouched.
    pub fn submit(
        &mut self,
        user: UserId,
        prompt: &TokenSeq,
        gen_tokens: usize,
        now: VirtualInstant,
        rng: &mut ChaCha12Rng,
    ) -> Result<RequestOutcome, SubmitError> {
        if gen_tokens == 0 {
            return Err(SubmitError::InvalidGenTokens);
        }
        debug_assert!(now >= self.now, "node clock must be monotone");
        self.now = self.now.max(now);
        self.check_rate_limit(user, now)?;

        let n = prompt.len();
        let params = self.cfg.timing;
        let mut semantic_hit = false;
        let mut k_blocks = 0usize;
        let mut ttft;
        let mut decode_offsets: Vec<f64> = Vec::new();
        let response_text;

        let cached_response = self
            .semantic
            .as_ref()
            .and_then(|s| s.lookup(&prompt.source_text, now))
            .map(|(e, _)| e.response.clone());

        if let Some(resp) = cached_response {
            // Semantic hit: stored response returned whole, network cost only.
            semantic_hit = true;
            ttft = semantic_hit_time(rng, &params);
            response_text = resp;
        } else {
            if let Some(p) = self.prefix.as_mut() {
                k_blocks = p.match_prefix(prompt, user, now);
            }
            let k_tokens = k_blocks * self.cfg.prefix.block_size;
            ttft = prefill_time(n, k_tokens.min(n), rng, &params).expect("k <= n by construction");
            if let Some(p) = self.prefix.as_mut() {
                p.insert_sequence(prompt, user, now);
            }
            let mut offset = 0.0;
            for _ in 0..gen_tokens {
                offset += decode_time(1, rng, &params);
                decode_offsets.push(offset);
            }
            response_text = synth_response(prompt, gen_tokens);
            if let Some(s) = self.semantic.as_mut() {
                if !prompt.source_text.is_empty() {
                    s.insert(&prompt.source_text, &response_text, now);
                }
            }
        }

        // Defenses, applied last.
        if self.cfg.defenses.constant_time {
            ttft = prefill_time_exact(n, 0, &params);
        }
        if self.cfg.defenses.delay_injection_sigma > 0.0 {
            let delay = Normal::new(0.0, self.cfg.defenses.delay_injection_sigma)
                .unwrap()
                .sample(rng)
                .abs();
            ttft += delay;
        }
        let decode_total = decode_offsets.last().copied().unwrap_or(0.0);
        let total_latency_s = ttft + decode_total;
        let token_times_s = if self.cfg.defenses.streaming && !semantic_hit {
            decode_offsets.iter().map(|o| ttft + o).collect()
        } else {
            Vec::new()
        };
        let ttft_s = if self.cfg.defenses.streaming {
            ttft
        } else {
            total_latency_s
        };

        Ok(RequestOutcome {
            ttft_s,
            token_times_s,
            response_text,
            total_latency_s,
            debug: DebugInfo {
                k_blocks,
                semantic_hit,
            },
        })
    }

    /// Tokenizes and submits a text request.
    pub fn submit_text(
        &mut self,
        user: UserId,
        text: &str,
        gen_tokens: usize,
        now: VirtualInstant,
        rng: &mut ChaCha12Rng,
    ) -> Result<RequestOutcome, SubmitError> {
        let seq = tokenize(text);
        self.submit(user, &seq, gen_tokens, now, rng)
    }

    /// Ground truth for an outcome. Only available on test-mode nodes.
    pub fn debug_truth(&self, outcome: &RequestOutcome) -> Result<DebugInfo, DebugError> {
        if !self.cfg.debug_enabled {
            return Err(DebugError::DebugDisabled);
        }
        Ok(outcome.debug)
    }

    pub fn prefix_stats(&self) -> Option<PrefixCacheStats> {
        self.prefix.as_ref().map(|p| p.stats())
    }

    pub fn semantic_entries(&self) -> usize {
        self.semantic.as_ref().map_or(0, |s| s.len())
    }

    pub fn rate_rejections(&self) -> u64 {
        self.rate_rejections
    }
}

fn synth_response(prompt: &TokenSeq, gen_tokens: usize) -> String {
    let mut bytes = Vec::with_capacity(prompt.len() * 8);
    for t in &prompt.tokens {
        bytes.extend_from_slice(&t.0.to_le_bytes());
    }
    format!(
        "resp-{:016x}-{gen_tokens}",
        crate::model::fnv1a64(&bytes)
    )
}
