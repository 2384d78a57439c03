//! The attacker's measurement side: offline calibration of the
//! TTFT-versus-hit-blocks relation, robust outlier filtering, weighted
//! hit-count prediction, boolean field-hit decisions, and semantic
//! hit/miss classification.
//!
//! Calibration never touches ground truth: it engineers its own hit counts
//! by inserting a nonce-fresh base prompt and then querying prompts that
//! share exactly `k` blocks with it, so it works against an
//! attack-realistic node with the debug channel disabled.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TokenId, TokenSeq};
use crate::node::{ServingNode, SubmitError};
use crate::prefix_cache::UserId;
use crate::time::VirtualDuration;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyzerError {
    #[error("query budget {budget} cannot cover {required} calibration queries")]
    BudgetExceeded { budget: usize, required: usize },
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("profile needs at least two distinct hit levels")]
    DegenerateProfile,
    #[error("filtered hit/miss supports overlap; timing channel looks closed")]
    OverlappingProfiles,
}

/// Raw calibration measurements grouped by engineered hit-block count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingProfile {
    pub format_version: u32,
    pub n: usize,
    pub block_size: usize,
    pub levels: Vec<LevelSamples>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSamples {
    pub k: usize,
    pub samples: Vec<f64>,
}

pub const PROFILE_FORMAT_VERSION: u32 = 1;

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

const MAD_TO_SIGMA: f64 = 1.4826;
const OUTLIER_CUT: f64 = 3.5;
const MAX_REMOVED_FRACTION: f64 = 0.3;

/// Removes points farther than `3.5 * 1.4826 * MAD` from the median, but
/// never more than 30% of the input (the nearest flagged points are kept).
pub fn filter_outliers(samples: &[f64]) -> Result<Vec<f64>, AnalyzerError> {
    if samples.len() < 3 {
        return Err(AnalyzerError::TooFewSamples(samples.len()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut deviations: Vec<f64> = sorted.iter().map(|x| (x - med).abs()).collect();
    deviations.sort_by(f64::total_cmp);
    let mad = median(&deviations);
    let cut = OUTLIER_CUT * MAD_TO_SIGMA * mad;

    let mut flagged: Vec<usize> = (0..samples.len())
        .filter(|&i| (samples[i] - med).abs() > cut)
        .collect();
    let budget = (samples.len() as f64 * MAX_REMOVED_FRACTION).floor() as usize;
    if flagged.len() > budget {
        // Drop only the farthest points; keep the rest.
        flagged.sort_by(|&a, &b| {
            (samples[a] - med)
                .abs()
                .total_cmp(&(samples[b] - med).abs())
        });
        flagged = flagged.split_off(flagged.len() - budget);
    }
    let drop: std::collections::HashSet<usize> = flagged.into_iter().collect();
    Ok(samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, x)| *x)
        .collect())
}

const CALIBRATION_THINK_S: f64 = 0.01;

fn fresh_tokens(count: usize, rng: &mut ChaCha12Rng) -> Vec<TokenId> {
    (0..count)
        .map(|_| TokenId(rng.random::<u64>().max(1)))
        .collect()
}

fn submit_retrying(
    node: &mut ServingNode,
    user: UserId,
    prompt: &TokenSeq,
    rng: &mut ChaCha12Rng,
) -> f64 {
    loop {
        let now = node.now() + VirtualDuration::from_secs_f64(CALIBRATION_THINK_S);
        match node.submit(user, prompt, 1, now, rng) {
            Ok(outcome) => {
                node.advance_clock(VirtualDuration::from_secs_f64(outcome.ttft_s));
                return outcome.ttft_s;
            }
            // Back off one virtual second; the sliding window frees up.
            Err(SubmitError::RateLimited) => {
                node.advance_clock(VirtualDuration::from_secs(1))
            }
            Err(e) => unreachable!("calibration submit rejected: {e}"),
        }
    }
}

/// Samples the node's TTFT at a spread of engineered hit levels covering
/// `[0, n / block_size]`. Each level uses a fresh nonce family: one base
/// insert, then probes sharing exactly `k` blocks with it. Total queries
/// stay within `query_budget`.
pub fn calibrate(
    node: &mut ServingNode,
    user: UserId,
    n: usize,
    reps_per_k: usize,
    query_budget: usize,
    rng: &mut ChaCha12Rng,
) -> Result<TimingProfile, AnalyzerError> {
    let b = node.block_size();
    let total_blocks = n / b;
    assert!(total_blocks >= 1, "prompt must cover at least one block");

    let step = total_blocks.div_ceil(10).max(1);
    let mut ks: Vec<usize> = (0..=total_blocks / step).map(|i| i * step).collect();
    if *ks.last().unwrap() != total_blocks {
        ks.push(total_blocks);
    }

    let min_reps = reps_per_k.max(1);
    let required = ks.len() * (1 + min_reps);
    if query_budget < required {
        return Err(AnalyzerError::BudgetExceeded {
            budget: query_budget,
            required,
        });
    }
    let reps = (query_budget - ks.len()) / ks.len();

    let mut levels = Vec::with_capacity(ks.len());
    for &k in &ks {
        let base = TokenSeq::from_raw(fresh_tokens(total_blocks * b, rng));
        submit_retrying(node, user, &base, rng);
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut tokens = base.tokens[..k * b].to_vec();
            tokens.extend(fresh_tokens(n - k * b, rng));
            let probe = TokenSeq::from_raw(tokens);
            samples.push(submit_retrying(node, user, &probe, rng));
        }
        levels.push(LevelSamples { k, samples });
    }
    Ok(TimingProfile {
        format_version: PROFILE_FORMAT_VERSION,
        n,
        block_size: b,
        levels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Least-squares fit of t(k) on (n - kB) * n with Gaussian per-level
    /// likelihoods.
    CurveBayes,
    /// Nearest calibrated level by absolute distance.
    NearestLevel,
    /// Additive one-dimensional threshold stumps, greedy residual fitting.
    BoostedStumps,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [
        PredictorKind::CurveBayes,
        PredictorKind::NearestLevel,
        PredictorKind::BoostedStumps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::CurveBayes => "curve_bayes",
            PredictorKind::NearestLevel => "nearest_level",
            PredictorKind::BoostedStumps => "boosted_stumps",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelStats {
    k: usize,
    loc: f64,
    scale: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CurveFit {
    a: f64,
    b: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Stump {
    threshold: f64,
    left: f64,
    right: f64,
}

/// Candidate hit counts weighted by likelihood: non-negative, normalized,
/// sorted best-first.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCandidates {
    pub candidates: Vec<(usize, f64)>,
}

impl WeightedCandidates {
    fn from_weights(mut pairs: Vec<(usize, f64)>) -> Self {
        let total: f64 = pairs.iter().map(|(_, w)| w).sum();
        debug_assert!(total > 0.0);
        for (_, w) in &mut pairs {
            *w /= total;
        }
        pairs.retain(|(_, w)| *w > 1e-12);
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        WeightedCandidates { candidates: pairs }
    }

    pub fn top(&self) -> usize {
        self.candidates[0].0
    }

    /// Posterior mass on hit counts of at least `k`.
    pub fn mass_at_least(&self, k: usize) -> f64 {
        self.candidates
            .iter()
            .filter(|(c, _)| *c >= k)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Calibrated mapping from one observed TTFT to weighted hit-block
/// candidates and field-hit decisions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HitPredictor {
    pub format_version: u32,
    pub kind: PredictorKind,
    pub n: usize,
    pub block_size: usize,
    levels: Vec<LevelStats>,
    curve: CurveFit,
    stump_base: f64,
    stumps: Vec<Stump>,
    /// Posterior mass needed to call a field hit.
    pub field_threshold: f64,
}

const MIN_SCALE: f64 = 1e-9;
const STUMP_ROUNDS: usize = 300;
const STUMP_RATE: f64 = 0.1;

fn fit_stumps(mut xs: Vec<(f64, f64)>) -> (f64, Vec<Stump>) {
    xs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = xs.len() as f64;
    let base = xs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut residual: Vec<f64> = xs.iter().map(|(_, y)| y - base).collect();
    let mut stumps = Vec::with_capacity(STUMP_ROUNDS);
    for _ in 0..STUMP_ROUNDS {
        // Exact best split on the sorted xs by prefix sums.
        let total: f64 = residual.iter().sum();
        let mut prefix = 0.0;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..residual.len() - 1 {
            prefix += residual[i];
            if xs[i].0 == xs[i + 1].0 {
                continue;
            }
            let left_n = (i + 1) as f64;
            let right_n = n - left_n;
            let gain = prefix * prefix / left_n + (total - prefix) * (total - prefix) / right_n;
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((split, _)) = best else { break };
        let left_n = (split + 1) as f64;
        let left_sum: f64 = residual[..=split].iter().sum();
        let left = left_sum / left_n;
        let right = (total - left_sum) / (n - left_n);
        let threshold = 0.5 * (xs[split].0 + xs[split + 1].0);
        for (i, r) in residual.iter_mut().enumerate() {
            *r -= STUMP_RATE * if i <= split { left } else { right };
        }
        stumps.push(Stump {
            threshold,
            left: STUMP_RATE * left,
            right: STUMP_RATE * right,
        });
    }
    (base, stumps)
}

/// Fits a predictor to a calibration profile. Per-level samples are
/// outlier-filtered, summarized by median and MAD scale, and tied together
/// by the quadratic curve t(k) = a * (n - kB) * n + b.
pub fn fit(profile: &TimingProfile, kind: PredictorKind) -> Result<HitPredictor, AnalyzerError> {
    let mut levels = Vec::with_capacity(profile.levels.len());
    for level in &profile.levels {
        let filtered = if level.samples.len() >= 3 {
            filter_outliers(&level.samples)?
        } else {
            level.samples.clone()
        };
        if filtered.is_empty() {
            return Err(AnalyzerError::TooFewSamples(0));
        }
        let mut sorted = filtered.clone();
        sorted.sort_by(f64::total_cmp);
        let loc = median(&sorted);
        let mut dev: Vec<f64> = sorted.iter().map(|x| (x - loc).abs()).collect();
        dev.sort_by(f64::total_cmp);
        let scale = (median(&dev) * MAD_TO_SIGMA).max(MIN_SCALE);
        levels.push(LevelStats {
            k: level.k,
            loc,
            scale,
        });
    }
    levels.sort_by_key(|l| l.k);
    levels.dedup_by_key(|l| l.k);
    if levels.len() < 2 {
        return Err(AnalyzerError::DegenerateProfile);
    }

    let n = profile.n as f64;
    let b = profile.block_size as f64;
    let feats: Vec<f64> = levels.iter().map(|l| (n - l.k as f64 * b) * n).collect();
    let ys: Vec<f64> = levels.iter().map(|l| l.loc).collect();
    let fm = feats.iter().sum::<f64>() / feats.len() as f64;
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let var: f64 = feats.iter().map(|f| (f - fm) * (f - fm)).sum();
    let cov: f64 = feats.iter().zip(&ys).map(|(f, y)| (f - fm) * (y - ym)).sum();
    let a = if var > 0.0 { cov / var } else { 0.0 };
    let curve = CurveFit { a, b: ym - a * fm };

    let (stump_base, stumps) = if kind == PredictorKind::BoostedStumps {
        let mut pairs = Vec::new();
        for level in &profile.levels {
            let filtered = if level.samples.len() >= 3 {
                filter_outliers(&level.samples)?
            } else {
                level.samples.clone()
            };
            pairs.extend(filtered.into_iter().map(|x| (x, level.k as f64)));
        }
        fit_stumps(pairs)
    } else {
        (0.0, Vec::new())
    };

    Ok(HitPredictor {
        format_version: PROFILE_FORMAT_VERSION,
        kind,
        n: profile.n,
        block_size: profile.block_size,
        levels,
        curve,
        stump_base,
        stumps,
        field_threshold: 0.5,
    })
}

impl HitPredictor {
    /// Fitted location for an arbitrary hit level.
    fn curve_at(&self, k: usize) -> f64 {
        let f = (self.n as f64 - k as f64 * self.block_size as f64) * self.n as f64;
        self.curve.a * f + self.curve.b
    }

    /// Per-level scale, linearly interpolated between calibrated levels.
    fn scale_at(&self, k: usize) -> f64 {
        let k = k as f64;
        let first = self.levels.first().unwrap();
        let last = self.levels.last().unwrap();
        if k <= first.k as f64 {
            return first.scale;
        }
        if k >= last.k as f64 {
            return last.scale;
        }
        for w in self.levels.windows(2) {
            let (lo, hi) = (&w[0], &w[1]);
            if k <= hi.k as f64 {
                let t = (k - lo.k as f64) / (hi.k as f64 - lo.k as f64);
                return lo.scale + t * (hi.scale - lo.scale);
            }
        }
        last.scale
    }

    fn stump_eval(&self, ttft: f64) -> f64 {
        self.stump_base
            + self
                .stumps
                .iter()
                .map(|s| if ttft <= s.threshold { s.left } else { s.right })
                .sum::<f64>()
    }

    /// Normalized posterior over candidate hit counts given one observed
    /// TTFT, uniform prior, top candidate first.
    pub fn predict_block_hits(&self, ttft: f64, n: usize) -> WeightedCandidates {
        debug_assert_eq!(n, self.n, "predictor fitted for a different length");
        let total_blocks = self.n / self.block_size;
        match self.kind {
            PredictorKind::CurveBayes => {
                let logw: Vec<f64> = (0..=total_blocks)
                    .map(|k| {
                        let scale = self.scale_at(k);
                        let d = (ttft - self.curve_at(k)) / scale;
                        -0.5 * d * d - scale.ln()
                    })
                    .collect();
                let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                WeightedCandidates::from_weights(
                    logw.iter()
                        .enumerate()
                        .map(|(k, lw)| (k, (lw - top).exp()))
                        .collect(),
                )
            }
            PredictorKind::NearestLevel => {
                let best = self
                    .levels
                    .iter()
                    .min_by(|a, b| {
                        (ttft - a.loc)
                            .abs()
                            .total_cmp(&(ttft - b.loc).abs())
                            .then(a.k.cmp(&b.k))
                    })
                    .unwrap();
                WeightedCandidates::from_weights(vec![(best.k, 1.0)])
            }
            PredictorKind::BoostedStumps => {
                let kf = self.stump_eval(ttft).clamp(0.0, total_blocks as f64);
                let lo = kf.floor() as usize;
                let hi = kf.ceil() as usize;
                if lo == hi {
                    WeightedCandidates::from_weights(vec![(lo, 1.0)])
                } else {
                    let frac = kf - lo as f64;
                    WeightedCandidates::from_weights(vec![(hi, frac), (lo, 1.0 - frac)])
                }
            }
        }
    }

    /// True when the posterior mass on hit counts reaching the field's end
    /// block clears the decision threshold. Field separation of two or more
    /// blocks keeps this robust to one-off block errors.
    pub fn predict_field_hit(
        &self,
        ttft: f64,
        _field_start_block: usize,
        field_end_block: usize,
    ) -> bool {
        self.predict_block_hits(ttft, self.n)
            .mass_at_least(field_end_block)
            > self.field_threshold
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_json(s: &str) -> Result<HitPredictor, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Hit/miss decision boundary for the semantic cache: the midpoint between
/// the slowest filtered hit and the fastest filtered miss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SemanticClassifier {
    pub threshold: f64,
}

impl SemanticClassifier {
    pub fn fit(hit_samples: &[f64], miss_samples: &[f64]) -> Result<Self, AnalyzerError> {
        if hit_samples.len() < 10 || miss_samples.len() < 10 {
            return Err(AnalyzerError::TooFewSamples(
                hit_samples.len().min(miss_samples.len()),
            ));
        }
        let hits = filter_outliers(hit_samples)?;
        let misses = filter_outliers(miss_samples)?;
        let max_hit = hits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_miss = misses.iter().copied().fold(f64::INFINITY, f64::min);
        if max_hit >= min_miss {
            return Err(AnalyzerError::OverlappingProfiles);
        }
        Ok(SemanticClassifier {
            threshold: 0.5 * (max_hit + min_miss),
        })
    }

    pub fn classify(&self, ttft: f64) -> bool {
        ttft < self.threshold
    }
}

/// One-shot form of the semantic classifier.
pub fn classify_semantic_hit(
    hit_samples: &[f64],
    miss_samples: &[f64],
    ttft: f64,
) -> Result<bool, AnalyzerError> {
    Ok(SemanticClassifier::fit(hit_samples, miss_samples)?.classify(ttft))
}

/// Samples hit/miss TTFT profiles from a semantic-cache node by sending
/// `reps` unique gibberish queries twice each (the first submission misses
/// and caches, the repeat hits), then fits the midpoint classifier.
pub fn calibrate_semantic_classifier(
    node: &mut ServingNode,
    user: UserId,
    reps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SemanticClassifier, AnalyzerError> {
    let mut hits = Vec::with_capacity(reps);
    let mut misses = Vec::with_capacity(reps);
    for _ in 0..reps {
        let words: Vec<String> = (0..8)
            .map(|_| {
                (0..6)
                    .map(|_| (b'a' + (rng.random::<u8>() % 26)) as char)
                    .collect()
            })
            .collect();
        let text = words.join(" ");
        let seq = crate::model::tokenize(&text);
        misses.push(submit_retrying(node, user, &seq, rng));
        hits.push(submit_retrying(node, user, &seq, rng));
    }
    SemanticClassifier::fit(&hits, &misses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::NodeConfig;
    use crate::timing::{prefill_time_exact, TimingParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn noise_free_node() -> ServingNode {
        ServingNode::new(NodeConfig {
            timing: TimingParams::default().noise_free(),
            ..NodeConfig::default()
        })
    }

    fn noise_free_profile(n: usize) -> TimingProfile {
        assert_eq!(n, 800, "tests share one cached profile");
        static PROFILE: std::sync::OnceLock<TimingProfile> = std::sync::OnceLock::new();
        PROFILE
            .get_or_init(|| {
                let mut node = noise_free_node();
                calibrate(&mut node, 99, 800, 3, 120, &mut rng(5)).unwrap()
            })
            .clone()
    }

    #[test]
    fn zero_budget_is_rejected() {
        let mut node = noise_free_node();
        assert!(matches!(
            calibrate(&mut node, 99, 800, 10, 0, &mut rng(1)),
            Err(AnalyzerError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn default_sweep_plan_covers_grid_with_enough_reps() {
        let mut node = ServingNode::new(NodeConfig::default());
        let profile = calibrate(&mut node, 99, 800, 10, 600, &mut rng(2)).unwrap();
        let ks: Vec<usize> = profile.levels.iter().map(|l| l.k).collect();
        assert_eq!(ks, vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50]);
        for l in &profile.levels {
            assert!(l.samples.len() >= 10, "level {} has {}", l.k, l.samples.len());
        }
        let total: usize = profile.levels.iter().map(|l| l.samples.len() + 1).sum();
        assert!(total <= 600);
    }

    #[test]
    fn noise_free_calibration_has_zero_variance_per_level() {
        let profile = noise_free_profile(800);
        for l in &profile.levels {
            for s in &l.samples {
                assert_eq!(*s, l.samples[0]);
            }
        }
    }

    #[test]
    fn noise_free_round_trip_inverts_every_level() {
        let profile = noise_free_profile(800);
        let params = TimingParams::default().noise_free();
        for kind in PredictorKind::ALL {
            let p = fit(&profile, kind).unwrap();
            for l in &profile.levels {
                let t = prefill_time_exact(800, l.k * 16, &params);
                let cands = p.predict_block_hits(t, 800);
                assert_eq!(cands.top(), l.k, "kind {kind:?} level {}", l.k);
                if kind == PredictorKind::CurveBayes {
                    assert!((cands.candidates[0].1 - 1.0).abs() < 1e-9);
                }
            }
        }
        // The curve generalizes to uncalibrated levels.
        let p = fit(&profile, PredictorKind::CurveBayes).unwrap();
        for k in [1usize, 7, 23, 42, 49] {
            let t = prefill_time_exact(800, k * 16, &params);
            assert_eq!(p.predict_block_hits(t, 800).top(), k);
        }
    }

    #[test]
    fn midpoint_ttft_splits_weight_between_neighbours() {
        let mut node = ServingNode::new(NodeConfig::default());
        let profile = calibrate(&mut node, 99, 800, 10, 600, &mut rng(8)).unwrap();
        let p = fit(&profile, PredictorKind::CurveBayes).unwrap();
        let mid = 0.5 * (p.curve_at(10) + p.curve_at(11));
        let cands = p.predict_block_hits(mid, 800);
        let top2: Vec<usize> = cands.candidates.iter().take(2).map(|(k, _)| *k).collect();
        assert!(top2.contains(&10) && top2.contains(&11), "top2 {top2:?}");
        let split: f64 = cands.candidates.iter().take(2).map(|(_, w)| w).sum();
        assert!(split > 0.95, "neighbours carry {split}");
        for (_, w) in cands.candidates.iter().take(2) {
            assert!(*w > 0.0 && *w < 1.0);
        }
    }

    #[test]
    fn extreme_ttft_clamps_to_boundary_levels() {
        let profile = noise_free_profile(800);
        let p = fit(&profile, PredictorKind::CurveBayes).unwrap();
        let slow = p.predict_block_hits(10.0, 800);
        assert_eq!(slow.candidates, vec![(0, 1.0)]);
        let fast = p.predict_block_hits(0.0, 800);
        assert_eq!(fast.candidates, vec![(50, 1.0)]);
    }

    #[test]
    fn single_level_profile_is_degenerate() {
        let profile = TimingProfile {
            format_version: PROFILE_FORMAT_VERSION,
            n: 800,
            block_size: 16,
            levels: vec![LevelSamples {
                k: 0,
                samples: vec![0.7, 0.7, 0.7],
            }],
        };
        assert_eq!(
            fit(&profile, PredictorKind::CurveBayes).unwrap_err(),
            AnalyzerError::DegenerateProfile
        );
    }

    #[test]
    fn field_decision_is_exact_without_noise() {
        let profile = noise_free_profile(800);
        let p = fit(&profile, PredictorKind::CurveBayes).unwrap();
        let params = TimingParams::default().noise_free();
        let (start, end) = (12, 16);
        for k in 0..=50usize {
            let t = prefill_time_exact(800, k * 16, &params);
            assert_eq!(p.predict_field_hit(t, start, end), k >= end, "k={k}");
        }
    }

    #[test]
    fn field_decision_tolerates_default_noise() {
        let mut node = ServingNode::new(NodeConfig::default());
        let profile = calibrate(&mut node, 99, 800, 10, 600, &mut rng(3)).unwrap();
        let p = fit(&profile, PredictorKind::CurveBayes).unwrap();
        let params = TimingParams::default();
        let (start, end) = (12usize, 16usize);
        let mut r = rng(17);
        let trials = 400;
        let mut hit_ok = 0;
        let mut miss_ok = 0;
        for _ in 0..trials {
            let t = crate::timing::prefill_time(800, (end + 2) * 16, &mut r, &params).unwrap();
            hit_ok += p.predict_field_hit(t, start, end) as usize;
            let t = crate::timing::prefill_time(800, (start - 2) * 16, &mut r, &params).unwrap();
            miss_ok += (!p.predict_field_hit(t, start, end)) as usize;
        }
        assert!(hit_ok as f64 / trials as f64 >= 0.95, "hit rate {hit_ok}/{trials}");
        assert!(miss_ok as f64 / trials as f64 >= 0.95, "miss rate {miss_ok}/{trials}");
    }

    #[test]
    fn filter_keeps_equal_samples_and_rejects_tiny_input() {
        assert_eq!(
            filter_outliers(&[1.0, 1.0]).unwrap_err(),
            AnalyzerError::TooFewSamples(2)
        );
        let xs = vec![0.5; 12];
        assert_eq!(filter_outliers(&xs).unwrap(), xs);
    }

    #[test]
    fn filter_removes_exactly_the_planted_outlier() {
        // 20 clean points near 0.69 plus one 5x-scale excursion.
        let mut xs: Vec<f64> = (0..20).map(|i| 0.69 + 0.004 * ((i as f64 / 19.0) - 0.5)).collect();
        xs.push(0.80);
        let kept = filter_outliers(&xs).unwrap();
        assert_eq!(kept.len(), 20);
        assert!(kept.iter().all(|x| *x < 0.75));
    }

    #[test]
    fn filter_is_idempotent_on_calibration_like_data() {
        for seed in 0..20u64 {
            let mut r = rng(seed);
            let normal = Normal::new(0.69, 0.004).unwrap();
            let mut xs: Vec<f64> = (0..50).map(|_| normal.sample(&mut r)).collect();
            xs.push(0.69 * 1.07);
            xs.push(0.69 * 0.93);
            let once = filter_outliers(&xs).unwrap();
            let twice = filter_outliers(&once).unwrap();
            assert_eq!(once, twice, "seed {seed}");
        }
    }

    #[test]
    fn predictor_json_round_trip() {
        let profile = noise_free_profile(800);
        for kind in PredictorKind::ALL {
            let p = fit(&profile, kind).unwrap();
            let back = HitPredictor::from_json(&p.to_json()).unwrap();
            assert_eq!(back.kind, p.kind);
            assert_eq!(back.n, p.n);
            let t = prefill_time_exact(800, 160, &TimingParams::default().noise_free());
            assert_eq!(
                back.predict_block_hits(t, 800).top(),
                p.predict_block_hits(t, 800).top()
            );
        }
        let profile_json = serde_json::to_string(&profile).unwrap();
        let back: TimingProfile = serde_json::from_str(&profile_json).unwrap();
        assert_eq!(back.levels.len(), profile.levels.len());
    }

    #[test]
    fn semantic_classifier_splits_clean_profiles() {
        let hits = vec![0.05; 10];
        let misses = vec![0.15; 10];
        let c = SemanticClassifier::fit(&hits, &misses).unwrap();
        assert!(c.classify(0.05));
        assert!(!c.classify(0.15));
        assert!(classify_semantic_hit(&hits, &misses, 0.06).unwrap());
        assert_eq!(
            SemanticClassifier::fit(&hits, &hits).unwrap_err(),
            AnalyzerError::OverlappingProfiles
        );
        assert_eq!(
            SemanticClassifier::fit(&hits[..5], &misses).unwrap_err(),
            AnalyzerError::TooFewSamples(5)
        );
    }

    proptest! {
        /// Posterior weights are a distribution regardless of the observed
        /// value or predictor kind.
        #[test]
        fn posterior_is_normalized(ttft in 0.0f64..3.0, kind_idx in 0usize..3) {
            let profile = noise_free_profile(800);
            let p = fit(&profile, PredictorKind::ALL[kind_idx]).unwrap();
            let cands = p.predict_block_hits(ttft, 800);
            let total: f64 = cands.candidates.iter().map(|(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(cands.candidates.iter().all(|(_, w)| *w >= 0.0));
            // Sorted best-first.
            for w in cands.candidates.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }
    }
}
