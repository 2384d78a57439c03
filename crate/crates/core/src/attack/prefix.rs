//! Field-by-field input construction against the prefix cache.
//!
//! The constructor walks the form in prompt order: preceding fields stay
//! pinned to their matched values, the current field carries the candidate
//! under test, and every later field holds a reserved trailing value that no
//! real candidate can collide with (empty text renders as pure filler; enum
//! fields reserve one option that is claimed by elimination instead of being
//! probed). This keeps the attacker's own cache insertions from ever
//! producing a hit signal past the current field, so a field-hit decision
//! can only come from the victim's cached prompt.
//!
//! Three candidate-ordering strategies are provided: marginal sampling
//! without replacement, a naive-Bayes conditional ranker over the matched
//! context, and best-first completion over a word bigram model.

use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ChiefComplaint, Field, FieldRecord, FieldSpan, Gender, ModelError, PromptTemplate,
};
use crate::node::{RequestOutcome, ServingNode, SubmitError};
use crate::prefix_cache::UserId;
use crate::time::VirtualDuration;

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("corpus has no records")]
    EmptyCorpus,
    #[error("candidate pool exhausted for field {field}")]
    FieldExhausted { field: Field },
    #[error("attack already concluded")]
    AttackConcluded,
    #[error(transparent)]
    Render(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Sample candidates without replacement from the field marginal.
    Baseline,
    /// Rank untried values by conditional probability given matched fields.
    NaiveBayes,
    /// Best-first completions over the field's word bigram model.
    ProbVocab,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Baseline, Strategy::NaiveBayes, Strategy::ProbVocab];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::NaiveBayes => "naive_bayes",
            Strategy::ProbVocab => "prob_vocab",
        }
    }
}

const START_MARK: &str = "\u{1}start";
const END_MARK: &str = "\u{1}end";

/// Conditioning key of a matched field value. Ages condition on their
/// decade band so the tables stay dense.
fn ctx_key(field: Field, value: &str) -> String {
    match field {
        Field::Age => {
            let age: u32 = value.parse().unwrap_or(0);
            format!("band{}", age / 10)
        }
        _ => value.to_string(),
    }
}

/// Frequency tables learned from an open corpus: per-field marginals,
/// pairwise conditionals against every earlier field, and word bigrams
/// within free-text fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusModel {
    pub records: usize,
    marginals: Vec<BTreeMap<String, u32>>,
    /// (field i, earlier field j) -> (value_i, ctx_j) -> count.
    pair_counts: HashMap<(usize, usize), BTreeMap<(String, String), u32>>,
    /// Distinct conditioning keys per field, for additive smoothing.
    ctx_sizes: Vec<usize>,
    /// Word bigram counts for free-text fields.
    bigrams: HashMap<usize, BTreeMap<(String, String), u32>>,
}

const TEXT_FIELDS: [Field; 3] = [Field::DiseaseHistory, Field::Symptoms, Field::Duration];
const SMOOTHING: f64 = 1.0;

pub fn train_corpus_model(records: &[FieldRecord]) -> Result<CorpusModel, AttackError> {
    if records.is_empty() {
        return Err(AttackError::EmptyCorpus);
    }
    let mut marginals = vec![BTreeMap::new(); 6];
    let mut pair_counts: HashMap<(usize, usize), BTreeMap<(String, String), u32>> = HashMap::new();
    let mut ctx_keys: Vec<HashSet<String>> = vec![HashSet::new(); 6];
    let mut bigrams: HashMap<usize, BTreeMap<(String, String), u32>> = HashMap::new();

    for r in records {
        let values: Vec<String> = Field::ALL.iter().map(|f| r.value(*f)).collect();
        for (i, v) in values.iter().enumerate() {
            *marginals[i].entry(v.clone()).or_default() += 1;
            ctx_keys[i].insert(ctx_key(Field::ALL[i], v));
            for (j, ctx_value) in values.iter().enumerate().take(i) {
                let ctx = ctx_key(Field::ALL[j], ctx_value);
                *pair_counts
                    .entry((i, j))
                    .or_default()
                    .entry((v.clone(), ctx))
                    .or_default() += 1;
            }
        }
        for field in TEXT_FIELDS {
            let table = bigrams.entry(field.index()).or_default();
            let text = r.value(field);
            let mut prev = START_MARK.to_string();
            for w in text.split_whitespace() {
                *table.entry((prev.clone(), w.to_string())).or_default() += 1;
                prev = w.to_string();
            }
            *table.entry((prev, END_MARK.to_string())).or_default() += 1;
        }
    }
    Ok(CorpusModel {
        records: records.len(),
        marginals,
        pair_counts,
        ctx_sizes: ctx_keys.iter().map(|s| s.len()).collect(),
        bigrams,
    })
}

impl CorpusModel {
    /// Observed values of a field with their counts, most frequent first.
    pub fn marginal(&self, field: Field) -> Vec<(String, u32)> {
        let mut v: Vec<(String, u32)> = self.marginals[field.index()]
            .iter()
            .map(|(k, c)| (k.clone(), *c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn knows_value(&self, field: Field, value: &str) -> bool {
        self.marginals[field.index()].contains_key(value)
    }

    fn marginal_count(&self, field: Field, value: &str) -> u32 {
        self.marginals[field.index()].get(value).copied().unwrap_or(0)
    }

    /// Log of the smoothed naive-Bayes score of `value` for `field` given
    /// the matched earlier fields: log P(v) + sum_j log P(ctx_j | v).
    pub fn nb_log_score(&self, field: Field, value: &str, matched: &[(Field, String)]) -> f64 {
        let i = field.index();
        let n = self.records as f64;
        let vocab = self.marginals[i].len() as f64;
        let cv = self.marginal_count(field, value) as f64;
        let mut score = ((cv + SMOOTHING) / (n + SMOOTHING * vocab)).ln();
        for (fj, mv) in matched {
            let j = fj.index();
            if j >= i {
                continue;
            }
            let ctx = ctx_key(*fj, mv);
            let pair = self
                .pair_counts
                .get(&(i, j))
                .and_then(|t| t.get(&(value.to_string(), ctx)))
                .copied()
                .unwrap_or(0) as f64;
            let denom = cv + SMOOTHING * self.ctx_sizes[j] as f64;
            score += ((pair + SMOOTHING) / denom).ln();
        }
        score
    }

    /// Per-record log-likelihood of a field under the conditional model
    /// (used to validate that correlations were actually learned).
    pub fn conditional_log_likelihood(&self, record: &FieldRecord, field: Field) -> f64 {
        let matched: Vec<(Field, String)> = Field::ALL
            .iter()
            .take(field.index())
            .map(|f| (*f, record.value(*f)))
            .collect();
        let scores: Vec<f64> = self.marginals[field.index()]
            .keys()
            .map(|v| self.nb_log_score(field, v, &matched))
            .collect();
        let target = self.nb_log_score(field, &record.value(field), &matched);
        // Normalize over the vocabulary so this is a proper log-probability.
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logz = top + scores.iter().map(|s| (s - top).exp()).sum::<f64>().ln();
        target - logz
    }

    /// Marginal log-likelihood of the same field, for comparison.
    pub fn marginal_log_likelihood(&self, record: &FieldRecord, field: Field) -> f64 {
        let n = self.records as f64;
        let vocab = self.marginals[field.index()].len() as f64;
        let cv = self.marginal_count(field, &record.value(field)) as f64;
        ((cv + SMOOTHING) / (n + SMOOTHING * vocab)).ln()
    }

    fn bigram_transitions(&self, field: Field) -> HashMap<String, Vec<(String, f64)>> {
        let mut by_prev: HashMap<String, Vec<(String, u32)>> = HashMap::new();
        if let Some(table) = self.bigrams.get(&field.index()) {
            for ((prev, next), c) in table {
                by_prev.entry(prev.clone()).or_default().push((next.clone(), *c));
            }
        }
        by_prev
            .into_iter()
            .map(|(prev, nexts)| {
                let total: u32 = nexts.iter().map(|(_, c)| c).sum();
                let probs = nexts
                    .into_iter()
                    .map(|(w, c)| (w, (c as f64 / total as f64).ln()))
                    .collect();
                (prev, probs)
            })
            .collect()
    }
}

/// Best-first enumeration of phrases under a word bigram model, highest
/// probability first. Bounded to keep memory and probe counts sane.
struct BigramSearch {
    transitions: HashMap<String, Vec<(String, f64)>>,
    heap: BinaryHeap<HeapItem>,
    emitted: usize,
}

const BIGRAM_EMISSION_CAP: usize = 10_000;
const BIGRAM_MAX_WORDS: usize = 8;

struct HeapItem {
    logp: f64,
    words: Vec<String>,
    complete: bool,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.logp == other.logp && self.words == other.words
    }
}
impl Eq for HeapItem {}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap on log-probability; ties resolved lexicographically so
        // enumeration order is deterministic.
        self.logp
            .total_cmp(&other.logp)
            .then_with(|| other.words.cmp(&self.words))
    }
}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl BigramSearch {
    fn new(model: &CorpusModel, field: Field) -> Self {
        let transitions = model.bigram_transitions(field);
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem {
            logp: 0.0,
            words: Vec::new(),
            complete: false,
        });
        BigramSearch {
            transitions,
            heap,
            emitted: 0,
        }
    }

    fn next_phrase(&mut self) -> Option<String> {
        if self.emitted >= BIGRAM_EMISSION_CAP {
            return None;
        }
        while let Some(item) = self.heap.pop() {
            if item.complete {
                self.emitted += 1;
                return Some(item.words.join(" "));
            }
            let prev = item.words.last().map(|s| s.as_str()).unwrap_or(START_MARK);
            if let Some(nexts) = self.transitions.get(prev) {
                for (w, lp) in nexts {
                    if w == END_MARK {
                        if !item.words.is_empty() {
                            self.heap.push(HeapItem {
                                logp: item.logp + lp,
                                words: item.words.clone(),
                                complete: true,
                            });
                        }
                    } else if item.words.len() < BIGRAM_MAX_WORDS {
                        let mut words = item.words.clone();
                        words.push(w.clone());
                        self.heap.push(HeapItem {
                            logp: item.logp + lp,
                            words,
                            complete: false,
                        });
                    }
                }
            }
        }
        None
    }
}

/// Trailing value for fields after the one under test. Text fields render
/// as pure filler; enum fields pin their reserved option.
fn trailing_value(field: Field) -> &'static str {
    match field {
        Field::Age => "0",
        Field::Gender => RESERVED_GENDER,
        Field::DiseaseHistory | Field::Symptoms | Field::Duration => "",
        Field::ChiefComplaint => RESERVED_COMPLAINT,
    }
}

const RESERVED_GENDER: &str = "male";
const RESERVED_COMPLAINT: &str = "treatment options";

/// The reserved value of an enum field is never probed (the trailing fill
/// of earlier probes would always hit it); it is claimed by elimination
/// once every alternative has missed.
fn reserved_value(field: Field) -> Option<&'static str> {
    match field {
        Field::Gender => Some(RESERVED_GENDER),
        Field::ChiefComplaint => Some(RESERVED_COMPLAINT),
        _ => None,
    }
}

enum FieldPlan {
    List { ordered: Vec<String>, cursor: usize },
    Bigram(BigramSearch),
}

impl FieldPlan {
    fn next(&mut self, tried: &HashSet<String>) -> Option<String> {
        match self {
            FieldPlan::List { ordered, cursor } => {
                while *cursor < ordered.len() {
                    let v = ordered[*cursor].clone();
                    *cursor += 1;
                    if !tried.contains(&v) {
                        return Some(v);
                    }
                }
                None
            }
            FieldPlan::Bigram(search) => loop {
                let v = search.next_phrase()?;
                if !tried.contains(&v) && !v.is_empty() {
                    return Some(v);
                }
            },
        }
    }
}

/// Exhaustive age order: the most frequent age of each decade band first
/// (bands by descending corpus mass), then the remaining observed ages by
/// frequency, then every unobserved age ascending.
fn age_plan(model: &CorpusModel) -> Vec<String> {
    let marginal = model.marginal(Field::Age);
    let mut bands: BTreeMap<usize, Vec<(String, u32)>> = BTreeMap::new();
    for (v, c) in &marginal {
        let band = v.parse::<u32>().unwrap_or(0) as usize / 10;
        bands.entry(band).or_default().push((v.clone(), *c));
    }
    let mut band_order: Vec<(usize, u32)> = bands
        .iter()
        .map(|(b, vs)| (*b, vs.iter().map(|(_, c)| c).sum()))
        .collect();
    band_order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut ordered = Vec::new();
    let mut used: HashSet<String> = HashSet::new();
    for (band, _) in &band_order {
        let mut vs = bands[band].clone();
        vs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let rep = vs[0].0.clone();
        used.insert(rep.clone());
        ordered.push(rep);
    }
    for (v, _) in &marginal {
        if used.insert(v.clone()) {
            ordered.push(v.clone());
        }
    }
    for age in 0..=120u32 {
        let v = age.to_string();
        if used.insert(v.clone()) {
            ordered.push(v);
        }
    }
    ordered
}

/// Weighted sampling without replacement from the marginal.
fn baseline_plan(model: &CorpusModel, field: Field, rng: &mut ChaCha12Rng) -> Vec<String> {
    let mut pool = model.marginal(field);
    let mut ordered = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let total: u64 = pool.iter().map(|(_, c)| *c as u64).sum();
        let mut x = rng.random_range(0..total);
        let mut idx = 0;
        for (i, (_, c)) in pool.iter().enumerate() {
            if x < *c as u64 {
                idx = i;
                break;
            }
            x -= *c as u64;
        }
        ordered.push(pool.remove(idx).0);
    }
    ordered
}

fn nb_plan(model: &CorpusModel, field: Field, matched: &[(Field, String)]) -> Vec<String> {
    let mut scored: Vec<(String, f64)> = model
        .marginal(field)
        .into_iter()
        .map(|(v, _)| {
            let s = model.nb_log_score(field, &v, matched);
            (v, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(v, _)| v).collect()
}

fn build_plan(
    model: &CorpusModel,
    field: Field,
    strategy: Strategy,
    matched: &[(Field, String)],
    rng: &mut ChaCha12Rng,
) -> FieldPlan {
    let mut ordered = match field {
        // Basic fields are searched exhaustively under every strategy.
        Field::Age => age_plan(model),
        Field::Gender => Gender::ALL.iter().map(|g| g.label().to_string()).collect(),
        Field::ChiefComplaint => match strategy {
            Strategy::Baseline => baseline_plan(model, field, rng),
            _ => nb_plan(model, field, matched),
        },
        _ => match strategy {
            Strategy::Baseline => baseline_plan(model, field, rng),
            Strategy::NaiveBayes => nb_plan(model, field, matched),
            Strategy::ProbVocab => {
                return FieldPlan::Bigram(BigramSearch::new(model, field));
            }
        },
    };
    if let Some(reserved) = reserved_value(field) {
        ordered.retain(|v| v != reserved);
    }
    // Chief complaint options outside the corpus are still probed last.
    if field == Field::ChiefComplaint {
        for option in ChiefComplaint::ALL {
            let label = option.label().to_string();
            if Some(label.as_str()) != reserved_value(field) && !ordered.contains(&label) {
                ordered.push(label);
            }
        }
    }
    ordered.retain(|v| !v.is_empty());
    FieldPlan::List { ordered, cursor: 0 }
}

/// One emitted probe: the full record to render plus its bookkeeping.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub record: FieldRecord,
    pub field: Field,
    pub value: String,
    /// Strictly increasing probe sequence number.
    pub probe_seq: u64,
}

/// Progress of one attack run: matched prefix, per-field search state, and
/// budget counters.
pub struct AttackState {
    current_field: usize,
    matched: Vec<String>,
    tried: HashSet<String>,
    plan: Option<FieldPlan>,
    outstanding: Option<Candidate>,
    probe_seq: u64,
    pub attempts: u64,
    pub tokens_used: u64,
    pub elapsed: VirtualDuration,
    complete: bool,
    exhausted_at: Option<Field>,
}

impl AttackState {
    pub fn new() -> Self {
        AttackState {
            current_field: 0,
            matched: Vec::new(),
            tried: HashSet::new(),
            plan: None,
            outstanding: None,
            probe_seq: 0,
            attempts: 0,
            tokens_used: 0,
            elapsed: VirtualDuration::ZERO,
            complete: false,
            exhausted_at: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn matched_values(&self) -> &[String] {
        &self.matched
    }

    pub fn current_field(&self) -> Option<Field> {
        Field::ALL.get(self.current_field).copied()
    }

    fn matched_pairs(&self) -> Vec<(Field, String)> {
        self.matched
            .iter()
            .enumerate()
            .map(|(i, v)| (Field::ALL[i], v.clone()))
            .collect()
    }

    fn advance(&mut self, value: String) {
        self.matched.push(value);
        self.current_field += 1;
        self.tried.clear();
        self.plan = None;
        if self.current_field == Field::ALL.len() {
            self.complete = true;
        }
    }

    fn build_record(&self, field_value: &str) -> Result<FieldRecord, ModelError> {
        let mut record = FieldRecord::new(
            0,
            Gender::Male,
            "",
            "",
            "",
            ChiefComplaint::TreatmentOptions,
        )?;
        for (i, field) in Field::ALL.into_iter().enumerate() {
            let value = if i < self.matched.len() {
                self.matched[i].clone()
            } else if i == self.current_field {
                field_value.to_string()
            } else {
                trailing_value(field).to_string()
            };
            record.set_value(field, &value)?;
        }
        Ok(record)
    }
}

impl Default for AttackState {
    fn default() -> Self {
        Self::new()
    }
}

/// Produces the next probe. Preceding fields are pinned, later fields carry
/// reserved filler, and no value is ever repeated for the same field. When
/// a pool runs dry the reserved enum value (if any) is claimed by
/// elimination and the search moves on; otherwise the field is exhausted.
pub fn next_candidate(
    state: &mut AttackState,
    model: &CorpusModel,
    strategy: Strategy,
    rng: &mut ChaCha12Rng,
) -> Result<Candidate, AttackError> {
    loop {
        if state.complete {
            return Err(AttackError::AttackConcluded);
        }
        let field = Field::ALL[state.current_field];
        if state.plan.is_none() {
            state.plan = Some(build_plan(
                model,
                field,
                strategy,
                &state.matched_pairs(),
                rng,
            ));
        }
        match state.plan.as_mut().unwrap().next(&state.tried) {
            Some(value) => {
                let record = state.build_record(&value)?;
                state.probe_seq += 1;
                let candidate = Candidate {
                    record,
                    field,
                    value,
                    probe_seq: state.probe_seq,
                };
                state.outstanding = Some(candidate.clone());
                return Ok(candidate);
            }
            None => {
                if let Some(reserved) = reserved_value(field) {
                    // Every alternative missed; the reserved value is the
                    // only one left.
                    state.advance(reserved.to_string());
                    continue;
                }
                state.exhausted_at = Some(field);
                return Err(AttackError::FieldExhausted { field });
            }
        }
    }
}

/// Folds one probe's verdict into the state: a hit pins the candidate value
/// and moves to the next field, a miss adds it to the tried set. Budget
/// counters grow by the probe's rendered length and virtual latency.
pub fn record_result(
    state: &mut AttackState,
    field_hit: bool,
    probe_tokens: usize,
    probe_elapsed: VirtualDuration,
) {
    let candidate = state
        .outstanding
        .take()
        .expect("record_result without an outstanding candidate");
    state.attempts += 1;
    state.tokens_used += probe_tokens as u64;
    state.elapsed += probe_elapsed;
    if field_hit {
        state.advance(candidate.value);
    } else {
        state.tried.insert(candidate.value);
    }
}

/// Probe budget. `Ideal` means every limit is infinite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_tokens: u64,
    pub max_time: VirtualDuration,
}

impl Budget {
    pub fn ideal() -> Self {
        Budget {
            max_tokens: u64::MAX,
            max_time: VirtualDuration(u64::MAX),
        }
    }

    /// The constrained regime: 250K tokens, five virtual minutes. The
    /// request rate cap is enforced by the node itself.
    pub fn all_constraints() -> Self {
        Budget {
            max_tokens: 250_000,
            max_time: VirtualDuration::from_secs(300),
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.max_tokens == u64::MAX && self.max_time == VirtualDuration(u64::MAX)
    }
}

/// Decides field hits from attacker-observable outcomes.
pub trait FieldJudge {
    fn field_hit(&mut self, node: &ServingNode, outcome: &RequestOutcome, span: &FieldSpan) -> bool;
}

/// The timing-channel judge: a calibrated predictor over observed TTFT.
pub struct TimingFieldJudge {
    pub predictor: crate::analyzer::HitPredictor,
}

impl FieldJudge for TimingFieldJudge {
    fn field_hit(&mut self, _node: &ServingNode, outcome: &RequestOutcome, span: &FieldSpan) -> bool {
        self.predictor
            .predict_field_hit(outcome.ttft_s, span.start_block, span.end_block())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Complete,
    FieldExhausted(Field),
    TokenBudget,
    TimeBudget,
    RateLimited,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    /// Claimed value per field, in prompt order; `None` when never matched.
    pub claimed: Vec<Option<String>>,
    pub attempts: u64,
    pub tokens: u64,
    pub elapsed: VirtualDuration,
    pub stop: StopReason,
}

const RATE_LIMIT_STREAK_CAP: u32 = 600;
pub const DEFAULT_THINK_S: f64 = 0.01;

/// Drives the full attack loop against a node whose cache already holds the
/// victim's rendered prompt: construct, submit, judge, record, until the
/// form is recovered, a pool is exhausted, or the budget runs out.
#[allow(clippy::too_many_arguments)]
pub fn run_prefix_attack(
    node: &mut ServingNode,
    template: &PromptTemplate,
    model: &CorpusModel,
    strategy: Strategy,
    budget: &Budget,
    judge: &mut dyn FieldJudge,
    attacker: UserId,
    rng: &mut ChaCha12Rng,
) -> Result<AttackReport, AttackError> {
    let mut state = AttackState::new();
    let probe_tokens = template.total_tokens() as u64;
    let mut rate_streak = 0u32;
    let stop = loop {
        if state.is_complete() {
            break StopReason::Complete;
        }
        if state.tokens_used + probe_tokens > budget.max_tokens {
            break StopReason::TokenBudget;
        }
        if state.elapsed >= budget.max_time {
            break StopReason::TimeBudget;
        }
        let candidate = match next_candidate(&mut state, model, strategy, rng) {
            Ok(c) => c,
            Err(AttackError::AttackConcluded) => break StopReason::Complete,
            Err(AttackError::FieldExhausted { field }) => {
                break StopReason::FieldExhausted(field)
            }
            Err(e) => return Err(e),
        };
        let rendered = template.render(&candidate.record)?;
        let now = node.now() + VirtualDuration::from_secs_f64(DEFAULT_THINK_S);
        match node.submit(attacker, &rendered, 1, now, rng) {
            Ok(outcome) => {
                node.advance_clock(VirtualDuration::from_secs_f64(outcome.ttft_s));
                rate_streak = 0;
                let span = template.span(candidate.field);
                let hit = judge.field_hit(node, &outcome, &span);
                record_result(
                    &mut state,
                    hit,
                    rendered.len(),
                    VirtualDuration::from_secs_f64(outcome.ttft_s + DEFAULT_THINK_S),
                );
            }
            Err(SubmitError::RateLimited) => {
                // Wait out the sliding window; the wait burns attack time.
                state.outstanding = None;
                state.tried.insert(candidate.value);
                let backoff = VirtualDuration::from_secs(1);
                node.advance_clock(backoff);
                state.elapsed += backoff;
                rate_streak += 1;
                if rate_streak > RATE_LIMIT_STREAK_CAP {
                    break StopReason::RateLimited;
                }
            }
            Err(SubmitError::InvalidGenTokens) => unreachable!(),
        }
    };
    let mut claimed: Vec<Option<String>> = state.matched.iter().map(|v| Some(v.clone())).collect();
    claimed.resize(Field::ALL.len(), None);
    Ok(AttackReport {
        claimed,
        attempts: state.attempts,
        tokens: state.tokens_used,
        elapsed: state.elapsed,
        stop,
    })
}
