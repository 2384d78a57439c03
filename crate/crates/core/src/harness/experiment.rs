//! Experiment runners: end-to-end prefix and semantic attacks over many
//! victims, plus the defense sweep. Every run is fully determined by the
//! experiment seed; repetitions run in parallel on independent rng streams
//! and aggregate in repetition order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{
    calibrate, calibrate_semantic_classifier, fit, AnalyzerError, HitPredictor, PredictorKind,
};
use crate::attack::prefix::{
    run_prefix_attack, train_corpus_model, AttackError, AttackReport, Budget, CorpusModel,
    FieldJudge, Strategy, TimingFieldJudge,
};
use crate::attack::semantic::{
    build_cluster_tree, run_semantic_attack, SearchContext, SearchParams, SemanticAttackError,
};
use crate::harness::corpus::{
    generate_prefix_corpus, generate_semantic_corpus, jitter_query, PrefixCorpusSpec,
    SemanticCorpusSpec, CATEGORY_NAMES,
};
use crate::harness::report::ReportRow;
use crate::model::{Field, FieldRecord, FieldSpan, ModelError, PromptTemplate, TemplateSpec};
use crate::node::{CacheMode, NodeConfig, RequestOutcome, ServingNode};
use crate::time::VirtualDuration;

pub const VICTIM_USER: u64 = 1;
pub const ATTACKER_USER: u64 = 2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Semantic(#[from] SemanticAttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ground-truth judge for soundness checks: answers from the node's debug
/// channel instead of the timing side channel.
pub struct DebugFieldJudge;

impl FieldJudge for DebugFieldJudge {
    fn field_hit(&mut self, node: &ServingNode, outcome: &RequestOutcome, span: &FieldSpan) -> bool {
        node.debug_truth(outcome).expect("debug-mode node").k_blocks >= span.end_block()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// No budget limits: the theoretical upper bound.
    Ideal,
    /// Token, time, and request-rate constraints all active.
    All,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Ideal => "ideal",
            Regime::All => "all",
        }
    }

    pub fn budget(self) -> Budget {
        match self {
            Regime::Ideal => Budget::ideal(),
            Regime::All => Budget::all_constraints(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzerConfig {
    pub kind: PredictorKind,
    pub calibration_budget: usize,
    pub reps_per_k: usize,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            kind: PredictorKind::CurveBayes,
            calibration_budget: 600,
            reps_per_k: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefixExperimentConfig {
    pub id: String,
    pub seed: u64,
    pub victims: usize,
    pub strategies: Vec<Strategy>,
    pub regimes: Vec<Regime>,
    pub corpus: PrefixCorpusSpec,
    pub template: TemplateSpec,
    pub node: NodeConfig,
    pub analyzer: AnalyzerConfig,
    /// Swap the timing judge for the debug-truth judge (soundness runs).
    pub use_debug_judge: bool,
}

impl Default for PrefixExperimentConfig {
    fn default() -> Self {
        PrefixExperimentConfig {
            id: "prefix".to_string(),
            seed: 7,
            victims: 200,
            strategies: Strategy::ALL.to_vec(),
            regimes: vec![Regime::Ideal, Regime::All],
            corpus: PrefixCorpusSpec::default(),
            template: TemplateSpec::default(),
            node: NodeConfig::default(),
            analyzer: AnalyzerConfig::default(),
            use_debug_judge: false,
        }
    }
}

fn victim_stream(seed: u64, index: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + index as u64);
    rng
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outcome of one victim repetition, scored against the true record.
#[derive(Debug, Clone)]
pub struct ScoredRun {
    pub field_correct: [bool; 6],
    pub report: AttackReport,
}

impl ScoredRun {
    pub fn all_correct(&self) -> bool {
        self.field_correct.iter().all(|c| *c)
    }
}

fn score_report(report: &AttackReport, victim: &FieldRecord) -> [bool; 6] {
    std::array::from_fn(|i| {
        report.claimed[i].as_deref() == Some(victim.value(Field::ALL[i]).as_str())
    })
}

/// Calibrates a predictor for the template's rendered length against a
/// fresh attack-realistic node with the same serving parameters.
pub fn calibrate_for_template(
    node_cfg: &NodeConfig,
    template: &PromptTemplate,
    analyzer: &AnalyzerConfig,
    seed: u64,
) -> Result<HitPredictor, AnalyzerError> {
    let mut scratch_cfg = node_cfg.clone();
    scratch_cfg.cache_mode = CacheMode::Prefix;
    scratch_cfg.debug_enabled = false;
    let mut scratch = ServingNode::new(scratch_cfg);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let profile = calibrate(
        &mut scratch,
        ATTACKER_USER,
        template.total_tokens(),
        analyzer.reps_per_k,
        analyzer.calibration_budget,
        &mut rng,
    )?;
    fit(&profile, analyzer.kind)
}

/// Runs one victim repetition: fresh node, victim prompt cached, then the
/// full attack loop. Returns the scored result.
#[allow(clippy::too_many_arguments)]
pub fn run_one_prefix_victim(
    cfg: &PrefixExperimentConfig,
    template: &PromptTemplate,
    model: &CorpusModel,
    corpus: &[FieldRecord],
    predictor: Option<&HitPredictor>,
    strategy: Strategy,
    regime: Regime,
    index: usize,
) -> Result<ScoredRun, ExperimentError> {
    let mut rng = victim_stream(cfg.seed, index);
    let victim = corpus[rng.random_range(0..corpus.len())].clone();
    let mut node_cfg = cfg.node.clone();
    node_cfg.debug_enabled = true;
    let mut node = ServingNode::new(node_cfg);
    let victim_prompt = template.render(&victim)?;
    let now = node.now() + VirtualDuration::from_secs(1);
    node.submit(VICTIM_USER, &victim_prompt, 50, now, &mut rng)
        .expect("victim request accepted");

    let mut timing_judge;
    let mut debug_judge;
    let judge: &mut dyn FieldJudge = if cfg.use_debug_judge {
        debug_judge = DebugFieldJudge;
        &mut debug_judge
    } else {
        timing_judge = TimingFieldJudge {
            predictor: predictor.expect("timing judge needs a predictor").clone(),
        };
        &mut timing_judge
    };
    let report = run_prefix_attack(
        &mut node,
        template,
        model,
        strategy,
        &regime.budget(),
        judge,
        ATTACKER_USER,
        &mut rng,
    )?;
    Ok(ScoredRun {
        field_correct: score_report(&report, &victim),
        report,
    })
}

fn prefix_row(
    cfg: &PrefixExperimentConfig,
    strategy: Strategy,
    regime: Regime,
    runs: &[ScoredRun],
) -> ReportRow {
    let n = runs.len() as f64;
    let frac = |pred: &dyn Fn(&ScoredRun) -> bool| {
        runs.iter().filter(|r| pred(r)).count() as f64 / n
    };
    let disease = Field::DiseaseHistory.index();
    let symptoms = Field::Symptoms.index();
    let (attempts_mean, attempts_std) =
        mean_std(&runs.iter().map(|r| r.report.attempts as f64).collect::<Vec<_>>());
    let (tokens_mean, tokens_std) =
        mean_std(&runs.iter().map(|r| r.report.tokens as f64).collect::<Vec<_>>());
    let (time_mean, time_std) =
        mean_std(&runs.iter().map(|r| r.report.elapsed.as_secs_f64()).collect::<Vec<_>>());
    let field_recovery = runs
        .iter()
        .map(|r| r.field_correct.iter().filter(|c| **c).count() as f64 / 6.0)
        .sum::<f64>()
        / n;

    let mut row = ReportRow::empty(&cfg.id, "prefix");
    row.strategy = strategy.name().to_string();
    row.regime = regime.name().to_string();
    row.defense = defense_name(&cfg.node);
    row.victims = runs.len() as u64;
    row.asr_disease = Some(frac(&|r| r.field_correct[disease]));
    row.asr_symptoms = Some(frac(&|r| r.field_correct[symptoms]));
    row.asr_all = Some(frac(&|r| r.all_correct()));
    row.field_recovery = Some(field_recovery);
    row.attempts_mean = Some(attempts_mean);
    row.attempts_std = Some(attempts_std);
    row.tokens_mean = Some(tokens_mean);
    row.tokens_std = Some(tokens_std);
    row.time_s_mean = Some(time_mean);
    row.time_s_std = Some(time_std);
    row
}

fn defense_name(node: &NodeConfig) -> String {
    let d = &node.defenses;
    let mut parts = Vec::new();
    if d.isolation {
        parts.push("isolation");
    }
    if d.constant_time {
        parts.push("constant_time");
    }
    if d.delay_injection_sigma > 0.0 {
        parts.push("delay_injection");
    }
    if !d.streaming {
        parts.push("no_streaming");
    }
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join("+")
    }
}

/// Full prefix experiment: one corpus and calibration, then
/// strategies x regimes x victims, aggregated per combination.
pub fn run_prefix_experiment(
    cfg: &PrefixExperimentConfig,
) -> Result<Vec<ReportRow>, ExperimentError> {
    if cfg.victims == 0 || cfg.strategies.is_empty() || cfg.regimes.is_empty() {
        return Err(ExperimentError::ConfigInvalid(
            "victims, strategies and regimes must be non-empty".into(),
        ));
    }
    let template = PromptTemplate::build(&cfg.template)?;
    let mut corpus_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    corpus_rng.set_stream(0);
    let corpus = generate_prefix_corpus(&cfg.corpus, &mut corpus_rng);
    let model = train_corpus_model(&corpus)?;
    let predictor = if cfg.use_debug_judge {
        None
    } else {
        Some(calibrate_for_template(&cfg.node, &template, &cfg.analyzer, cfg.seed)?)
    };

    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for &regime in &cfg.regimes {
            let runs: Result<Vec<ScoredRun>, ExperimentError> = (0..cfg.victims)
                .into_par_iter()
                .map(|i| {
                    run_one_prefix_victim(
                        cfg,
                        &template,
                        &model,
                        &corpus,
                        predictor.as_ref(),
                        strategy,
                        regime,
                        i,
                    )
                })
                .collect();
            rows.push(prefix_row(cfg, strategy, regime, &runs?));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SemanticExperimentConfig {
    pub id: String,
    pub seed: u64,
    pub victims_per_category: usize,
    pub probe_budgets: Vec<usize>,
    pub target_leaves: usize,
    pub search: SearchParams,
    pub corpus: SemanticCorpusSpec,
    pub node: NodeConfig,
    pub classifier_reps: usize,
}

impl Default for SemanticExperimentConfig {
    fn default() -> Self {
        SemanticExperimentConfig {
            id: "semantic".to_string(),
            seed: 7,
            victims_per_category: 30,
            probe_budgets: vec![50, 200, 500],
            target_leaves: 13,
            search: SearchParams::default(),
            corpus: SemanticCorpusSpec::default(),
            node: NodeConfig {
                cache_mode: CacheMode::Semantic,
                ..NodeConfig::default()
            },
            classifier_reps: 10,
        }
    }
}

/// One semantic victim repetition at one probe budget. Success means the
/// attack's hit returned the victim's cached response.
#[derive(Debug, Clone)]
pub struct SemanticRun {
    pub category: usize,
    pub success: bool,
    pub probes_used: usize,
}

fn run_one_semantic_victim(
    cfg: &SemanticExperimentConfig,
    tree: &crate::attack::semantic::ClusterTree,
    ctx: &SearchContext,
    corpus: &[(String, usize)],
    category: usize,
    index: usize,
    budget: usize,
) -> SemanticRun {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2_000 + (category * 1_000 + index) as u64);
    let members: Vec<&String> = corpus
        .iter()
        .filter(|(_, c)| *c == category)
        .map(|(t, _)| t)
        .collect();
    let source = members[rng.random_range(0..members.len())];
    let heavy = rng.random::<f64>() < cfg.corpus.heavy_jitter_p;
    let victim_query = jitter_query(source, heavy, &mut rng);

    let mut node_cfg = cfg.node.clone();
    node_cfg.debug_enabled = true;
    let mut node = ServingNode::new(node_cfg);
    let now = node.now() + VirtualDuration::from_secs(1);
    let victim = node
        .submit_text(VICTIM_USER, &victim_query, 30, now, &mut rng)
        .expect("victim request accepted");

    let classifier = match calibrate_semantic_classifier(
        &mut node,
        ATTACKER_USER,
        cfg.classifier_reps,
        &mut rng,
    ) {
        Ok(c) => c,
        // A closed timing channel (e.g. constant-time defense) means the
        // attack cannot even calibrate; count it as a failure.
        Err(_) => {
            return SemanticRun {
                category,
                success: false,
                probes_used: 0,
            }
        }
    };
    let outcome = run_semantic_attack(
        &mut node,
        ATTACKER_USER,
        tree,
        ctx,
        &cfg.search,
        budget,
        &classifier,
        &mut rng,
    );
    SemanticRun {
        category,
        success: outcome.hit_response.as_deref() == Some(victim.response_text.as_str()),
        probes_used: outcome.probes_used,
    }
}

/// Full semantic experiment: rows per (budget, category) plus an overall
/// row per budget.
pub fn run_semantic_experiment(
    cfg: &SemanticExperimentConfig,
) -> Result<Vec<ReportRow>, ExperimentError> {
    if cfg.victims_per_category == 0 || cfg.probe_budgets.is_empty() {
        return Err(ExperimentError::ConfigInvalid(
            "victims_per_category and probe_budgets must be non-empty".into(),
        ));
    }
    let mut corpus_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    corpus_rng.set_stream(0);
    let corpus = generate_semantic_corpus(&cfg.corpus, &mut corpus_rng);
    let texts: Vec<String> = corpus.iter().map(|(t, _)| t.clone()).collect();
    let categories: Vec<usize> = corpus.iter().map(|(_, c)| *c).collect();
    let tree = build_cluster_tree(&texts, cfg.target_leaves)?;
    let ctx = SearchContext::with_categories(texts, categories);

    let mut rows = Vec::new();
    for &budget in &cfg.probe_budgets {
        let runs: Vec<SemanticRun> = (0..cfg.corpus.n_categories * cfg.victims_per_category)
            .into_par_iter()
            .map(|i| {
                let category = i / cfg.victims_per_category;
                let index = i % cfg.victims_per_category;
                run_one_semantic_victim(cfg, &tree, &ctx, &corpus, category, index, budget)
            })
            .collect();
        for (category, name) in CATEGORY_NAMES.iter().enumerate().take(cfg.corpus.n_categories) {
            let cat_runs: Vec<&SemanticRun> =
                runs.iter().filter(|r| r.category == category).collect();
            let mut row = ReportRow::empty(&cfg.id, "semantic");
            row.category = name.to_string();
            row.victims = cat_runs.len() as u64;
            row.asr = Some(
                cat_runs.iter().filter(|r| r.success).count() as f64 / cat_runs.len() as f64,
            );
            row.probes_mean = Some(
                cat_runs.iter().map(|r| r.probes_used as f64).sum::<f64>() / cat_runs.len() as f64,
            );
            row.budget_probes = Some(budget as u64);
            rows.push(row);
        }
        let mut overall = ReportRow::empty(&cfg.id, "semantic");
        overall.category = "overall".to_string();
        overall.victims = runs.len() as u64;
        overall.asr = Some(runs.iter().filter(|r| r.success).count() as f64 / runs.len() as f64);
        overall.probes_mean =
            Some(runs.iter().map(|r| r.probes_used as f64).sum::<f64>() / runs.len() as f64);
        overall.budget_probes = Some(budget as u64);
        rows.push(overall);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    None,
    Isolation,
    DelayInjection,
    ConstantTime,
    NoStreaming,
}

impl Defense {
    pub const ALL: [Defense; 5] = [
        Defense::None,
        Defense::Isolation,
        Defense::DelayInjection,
        Defense::ConstantTime,
        Defense::NoStreaming,
    ];
}

#[derive(Debug, Clone)]
pub struct DefenseEvalConfig {
    pub base: PrefixExperimentConfig,
    pub defenses: Vec<Defense>,
    /// Injected delay sigma as a multiple of the one-block timing gap.
    pub delay_sigma_multiplier: f64,
}

impl Default for DefenseEvalConfig {
    fn default() -> Self {
        DefenseEvalConfig {
            base: PrefixExperimentConfig {
                id: "defend".to_string(),
                victims: 50,
                strategies: vec![Strategy::NaiveBayes],
                regimes: vec![Regime::All],
                ..PrefixExperimentConfig::default()
            },
            defenses: Defense::ALL.to_vec(),
            delay_sigma_multiplier: 5.0,
        }
    }
}

/// Applies one defense to a node config, sizing delay injection from the
/// template's block timing gap.
pub fn apply_defense(
    node: &NodeConfig,
    defense: Defense,
    template: &PromptTemplate,
    sigma_multiplier: f64,
) -> NodeConfig {
    let mut cfg = node.clone();
    match defense {
        Defense::None => {}
        Defense::Isolation => cfg.defenses.isolation = true,
        Defense::DelayInjection => {
            let gap = cfg
                .timing
                .block_gap(template.total_tokens(), cfg.prefix.block_size);
            cfg.defenses.delay_injection_sigma = sigma_multiplier * gap;
        }
        Defense::ConstantTime => cfg.defenses.constant_time = true,
        Defense::NoStreaming => cfg.defenses.streaming = false,
    }
    cfg
}

/// Sweeps the configured defenses over the base prefix experiment, one
/// result row per defense.
pub fn run_defense_eval(cfg: &DefenseEvalConfig) -> Result<Vec<ReportRow>, ExperimentError> {
    let template = PromptTemplate::build(&cfg.base.template)?;
    let mut rows = Vec::new();
    for &defense in &cfg.defenses {
        let mut exp = cfg.base.clone();
        exp.node = apply_defense(&cfg.base.node, defense, &template, cfg.delay_sigma_multiplier);
        let mut defense_rows = run_prefix_experiment(&exp)?;
        for row in &mut defense_rows {
            row.kind = "defense".to_string();
        }
        rows.append(&mut defense_rows);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_prefix_cfg() -> PrefixExperimentConfig {
        PrefixExperimentConfig {
            victims: 6,
            strategies: vec![Strategy::NaiveBayes],
            regimes: vec![Regime::Ideal],
            corpus: PrefixCorpusSpec {
                n_records: 300,
                ..PrefixCorpusSpec::default()
            },
            ..PrefixExperimentConfig::default()
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = PrefixExperimentConfig {
            victims: 0,
            ..tiny_prefix_cfg()
        };
        assert!(matches!(
            run_prefix_experiment(&cfg),
            Err(ExperimentError::ConfigInvalid(_))
        ));
        let cfg = SemanticExperimentConfig {
            probe_budgets: vec![],
            ..SemanticExperimentConfig::default()
        };
        assert!(matches!(
            run_semantic_experiment(&cfg),
            Err(ExperimentError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn prefix_experiment_is_deterministic_and_scores_high_ideal() {
        let cfg = tiny_prefix_cfg();
        let a = run_prefix_experiment(&cfg).unwrap();
        let b = run_prefix_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        // With the default timing channel the attack recovers most victims.
        assert!(a[0].asr_disease.unwrap() >= 0.5, "{:?}", a[0]);
        assert!(a[0].attempts_mean.unwrap() > 0.0);
    }

    #[test]
    fn debug_judge_recovers_everything_without_noise() {
        let mut cfg = tiny_prefix_cfg();
        cfg.use_debug_judge = true;
        cfg.node.timing = cfg.node.timing.noise_free();
        let rows = run_prefix_experiment(&cfg).unwrap();
        assert_eq!(rows[0].asr_all.unwrap(), 1.0);
        assert_eq!(rows[0].asr_disease.unwrap(), 1.0);
    }

    #[test]
    fn semantic_experiment_shapes_rows_per_category_and_budget() {
        let cfg = SemanticExperimentConfig {
            victims_per_category: 2,
            probe_budgets: vec![30, 60],
            corpus: SemanticCorpusSpec {
                n_categories: 3,
                records_per_category: 8,
                ..SemanticCorpusSpec::default()
            },
            target_leaves: 3,
            ..SemanticExperimentConfig::default()
        };
        let rows = run_semantic_experiment(&cfg).unwrap();
        // (3 categories + overall) per budget.
        assert_eq!(rows.len(), 8);
        let overall: Vec<&ReportRow> =
            rows.iter().filter(|r| r.category == "overall").collect();
        assert_eq!(overall.len(), 2);
        assert!(overall[0].asr.unwrap() <= overall[1].asr.unwrap() + 1e-12);
    }

    #[test]
    fn isolation_defense_zeroes_prefix_asr() {
        let mut base = tiny_prefix_cfg();
        base.victims = 4;
        let cfg = DefenseEvalConfig {
            base,
            defenses: vec![Defense::None, Defense::Isolation],
            delay_sigma_multiplier: 5.0,
        };
        let rows = run_defense_eval(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].defense, "none");
        assert_eq!(rows[1].defense, "isolation");
        assert_eq!(rows[1].asr_all.unwrap(), 0.0);
        assert!(rows[0].asr_all.unwrap() > rows[1].asr_all.unwrap());
    }
}
