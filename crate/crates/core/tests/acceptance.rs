//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (visible with `--nocapture`; a failed assertion is
//! the FAIL line).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use cacheprobe::analyzer::{
    calibrate, calibrate_semantic_classifier, fit, AnalyzerError, PredictorKind,
};
use cacheprobe::attack::prefix::{train_corpus_model, Strategy};
use cacheprobe::harness::corpus::generate_prefix_corpus;
use cacheprobe::harness::experiment::{
    apply_defense, run_defense_eval, run_one_prefix_victim, run_prefix_experiment,
    run_semantic_experiment, Defense, DefenseEvalConfig, PrefixExperimentConfig, Regime,
    SemanticExperimentConfig, ATTACKER_USER, VICTIM_USER,
};
use cacheprobe::harness::report::ReportRow;
use cacheprobe::model::{tokenize, PromptTemplate, TokenSeq};
use cacheprobe::node::{CacheMode, NodeConfig, ServingNode};
use cacheprobe::prefix_cache::{PrefixCache, PrefixCacheConfig};
use cacheprobe::semantic_cache::{cosine, embed, SemanticCache, SemanticCacheConfig};
use cacheprobe::time::{VirtualDuration, VirtualInstant};
use cacheprobe::timing::{prefill_time, semantic_hit_time, TimingParams};

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn pass(criterion: &str, detail: String) {
    println!("ACCEPTANCE {criterion} PASS: {detail}");
}

#[test]
fn criterion_01_prefill_law_has_exact_quadratic_ratios() {
    let params = TimingParams {
        c0: 0.0,
        net_mu: 0.0,
        ..TimingParams::default().noise_free()
    };
    let t = |n: usize| prefill_time(n, 0, &mut rng(1), &params).unwrap();
    let (a, b, c) = (t(400), t(800), t(1600));
    assert_eq!(b / a, 4.0);
    assert_eq!(c / a, 16.0);
    assert_eq!(c / b, 4.0);
    pass("c1", format!("prefill ratios {a}:{b}:{c} = 1:4:16 exactly"));
}

#[test]
fn criterion_02_caches_match_brute_force_oracles() {
    const T0: VirtualInstant = VirtualInstant::EPOCH;
    let mut r = rng(2);
    // Prefix cache vs token-level block-LCP oracle.
    for trial in 0..1000 {
        let block = [4usize, 8, 16][r.random_range(0..3)];
        let mut cache = PrefixCache::new(PrefixCacheConfig {
            block_size: block,
            capacity_tokens: 1 << 20,
            ..PrefixCacheConfig::default()
        });
        let base: Vec<u64> = (0..r.random_range(0..64)).map(|_| r.random_range(1..40)).collect();
        let mut inserted: Vec<Vec<u64>> = Vec::new();
        for j in 0..r.random_range(1..5usize) {
            let cut = r.random_range(0..=base.len());
            let mut s = base[..cut].to_vec();
            s.extend((0..r.random_range(0..12)).map(|i| 1_000_000 + 1_000 * j as u64 + i));
            cache.insert_sequence(&TokenSeq::from_raw(s.iter().map(|&x| x.into()).collect()), 1, T0);
            inserted.push(s);
        }
        let qcut = r.random_range(0..=base.len());
        let mut q = base[..qcut].to_vec();
        q.extend((0..r.random_range(0..12)).map(|i| 9_000_000 + i));
        let got = cache.match_prefix(&TokenSeq::from_raw(q.iter().map(|&x| x.into()).collect()), 1, T0);
        let oracle = inserted
            .iter()
            .map(|s| {
                let cached = (s.len() / block) * block;
                let lcp = q.iter().zip(&s[..cached]).take_while(|(a, b)| a == b).count();
                lcp / block
            })
            .max()
            .unwrap_or(0)
            .min(q.len() / block);
        assert_eq!(got, oracle, "prefix oracle mismatch in trial {trial}");
    }

    // Semantic cache vs brute-force max-cosine threshold oracle.
    let word = |r: &mut ChaCha12Rng| {
        let w: String = (0..4).map(|_| (b'a' + r.random_range(0..6)) as char).collect();
        w
    };
    for trial in 0..1000 {
        let theta = 0.3 + 0.65 * r.random::<f64>();
        let mut cache = SemanticCache::new(SemanticCacheConfig {
            threshold: theta,
            ..SemanticCacheConfig::default()
        });
        let n = r.random_range(1..16usize);
        let mut texts = Vec::new();
        for i in 0..n {
            let words: Vec<String> = (0..r.random_range(2..6)).map(|_| word(&mut r)).collect();
            let t = words.join(" ");
            cache.insert(&t, &format!("resp{i}"), T0 + VirtualDuration::from_secs(i as u64));
            texts.push(t);
        }
        let words: Vec<String> = (0..r.random_range(2..6)).map(|_| word(&mut r)).collect();
        let query = words.join(" ");
        let now = T0 + VirtualDuration::from_secs(n as u64);
        let got = cache.lookup(&query, now).map(|(e, sim)| (e.query_text.clone(), sim));
        // Last insert of each distinct text is the logical entry.
        let mut logical: Vec<(usize, String)> = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            if let Some(slot) = logical.iter_mut().find(|(_, s)| s == t) {
                slot.0 = i;
            } else {
                logical.push((i, t.clone()));
            }
        }
        logical.sort_by_key(|(i, _)| *i);
        let q = embed(&query);
        let mut best: Option<(String, f64)> = None;
        for (_, t) in &logical {
            let sim = cosine(&q, &embed(t));
            if best.as_ref().is_none_or(|(_, b)| sim > *b) {
                best = Some((t.clone(), sim));
            }
        }
        let oracle = best.filter(|(_, sim)| *sim >= theta);
        match (&got, &oracle) {
            (None, None) => {}
            (Some((gt, gs)), Some((ot, os))) => {
                assert_eq!(gt, ot, "semantic oracle mismatch in trial {trial}");
                assert!((gs - os).abs() < 1e-12);
            }
            _ => panic!("semantic oracle mismatch in trial {trial}: {got:?} vs {oracle:?}"),
        }
    }
    pass("c2", "1000 prefix and 1000 semantic trials equal their oracles exactly".into());
}

/// Four evaluation fields, starts separated well beyond one block.
fn eval_fields(total_blocks: usize) -> [(usize, usize); 4] {
    let l = total_blocks;
    [
        (l / 5, l / 5 + 4),
        (l * 2 / 5, l * 2 / 5 + 4),
        (l * 3 / 5, l * 3 / 5 + 4),
        (l * 4 / 5, l * 4 / 5 + 4),
    ]
}

struct AnalyzerScores {
    kind: PredictorKind,
    block_acc: f64,
    field_acc: f64,
}

fn analyzer_scores(n: usize, seed: u64) -> Vec<AnalyzerScores> {
    let params = TimingParams::default();
    let mut node = ServingNode::new(NodeConfig::default());
    let mut cal_rng = rng(seed);
    let profile = calibrate(&mut node, ATTACKER_USER, n, 10, 600, &mut cal_rng).unwrap();
    let block = 16;
    let total_blocks = n / block;
    let fields = eval_fields(total_blocks);

    PredictorKind::ALL
        .into_iter()
        .map(|kind| {
            let predictor = fit(&profile, kind).unwrap();
            let mut r = rng(seed + 1);
            let mut block_ok = 0usize;
            let trials = 1000usize;
            for _ in 0..trials {
                let k = r.random_range(0..=total_blocks);
                let ttft = prefill_time(n, k * block, &mut r, &params).unwrap();
                if predictor.predict_block_hits(ttft, n).top() == k {
                    block_ok += 1;
                }
            }
            let mut field_ok = 0usize;
            let mut field_trials = 0usize;
            for (start, end) in fields {
                for i in 0..250 {
                    let positive = i % 2 == 0;
                    let k = if positive { end + 2 } else { start - 2 };
                    let ttft = prefill_time(n, k * block, &mut r, &params).unwrap();
                    let decision = predictor.predict_field_hit(ttft, start, end);
                    if decision == positive {
                        field_ok += 1;
                    }
                    field_trials += 1;
                }
            }
            AnalyzerScores {
                kind,
                block_acc: block_ok as f64 / trials as f64,
                field_acc: field_ok as f64 / field_trials as f64,
            }
        })
        .collect()
}

fn assert_analyzer_criterion(
    criterion: &str,
    n: usize,
    seed: u64,
    block_bound: f64,
    field_bound: f64,
) {
    let scores = analyzer_scores(n, seed);
    let detail: Vec<String> = scores
        .iter()
        .map(|s| format!("{}: block {:.3} field {:.3}", s.kind.name(), s.block_acc, s.field_acc))
        .collect();
    let best = scores
        .iter()
        .max_by(|a, b| a.block_acc.total_cmp(&b.block_acc))
        .unwrap();
    assert!(
        best.block_acc >= block_bound && best.field_acc >= field_bound,
        "best predictor {} scored block {:.3} (need {block_bound}) field {:.3} (need {field_bound}); all: {detail:?}",
        best.kind.name(),
        best.block_acc,
        best.field_acc,
    );
    // Field decisions aggregate block decisions over a two-block margin.
    assert!(best.field_acc >= best.block_acc);
    pass(criterion, format!("n={n}: {}", detail.join("; ")));
}

#[test]
fn criterion_03_analyzer_accuracy_at_800_tokens() {
    assert_analyzer_criterion("c3", 800, 30, 0.80, 0.95);
}

#[test]
fn criterion_04_analyzer_accuracy_at_1600_tokens() {
    assert_analyzer_criterion("c4", 1600, 40, 0.80, 0.98);
}

#[test]
fn criterion_05_semantic_hit_classifier() {
    // Calibrate against a live node, evaluate on fresh labeled draws from
    // the same latency laws the node uses.
    let mut node = ServingNode::new(NodeConfig {
        cache_mode: CacheMode::Semantic,
        ..NodeConfig::default()
    });
    let mut r = rng(50);
    let classifier = calibrate_semantic_classifier(&mut node, ATTACKER_USER, 10, &mut r).unwrap();
    let params = TimingParams::default();
    let mut correct = 0usize;
    let total = 10_000usize;
    for i in 0..total {
        let is_hit = i % 2 == 0;
        let ttft = if is_hit {
            semantic_hit_time(&mut r, &params)
        } else {
            let n = r.random_range(8..400usize);
            prefill_time(n, 0, &mut r, &params).unwrap()
        };
        if classifier.classify(ttft) == is_hit {
            correct += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.99, "classifier accuracy {acc}");

    // Constant-time defense closes the channel: profiles overlap.
    let mut defended = ServingNode::new(NodeConfig {
        cache_mode: CacheMode::Semantic,
        defenses: cacheprobe::node::DefenseConfig {
            constant_time: true,
            ..Default::default()
        },
        ..NodeConfig::default()
    });
    let err = calibrate_semantic_classifier(&mut defended, ATTACKER_USER, 10, &mut r).unwrap_err();
    assert_eq!(err, AnalyzerError::OverlappingProfiles);
    pass("c5", format!("accuracy {acc:.4} over 10^4 draws; constant-time yields OverlappingProfiles"));
}

fn find_row(rows: &[ReportRow], strategy: Strategy, regime: Regime) -> &ReportRow {
    rows.iter()
        .find(|r| r.strategy == strategy.name() && r.regime == regime.name())
        .expect("row present")
}

#[test]
fn criterion_06_end_to_end_prefix_attack_orderings() {
    let cfg = PrefixExperimentConfig::default(); // 200 victims, rho 0.8, seed 7
    let rows = run_prefix_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 6);

    for strategy in Strategy::ALL {
        let ideal = find_row(&rows, strategy, Regime::Ideal);
        let all = find_row(&rows, strategy, Regime::All);
        // (a) the unconstrained regime is an upper bound
        assert!(
            ideal.asr_all.unwrap() >= all.asr_all.unwrap(),
            "{strategy:?}: ideal {} < all {}",
            ideal.asr_all.unwrap(),
            all.asr_all.unwrap()
        );
        // (c) recovering everything is no easier than any single field
        for row in [ideal, all] {
            assert!(row.asr_all.unwrap() <= row.asr_disease.unwrap() + 1e-12);
            assert!(row.asr_all.unwrap() <= row.asr_symptoms.unwrap() + 1e-12);
        }
    }
    // (b) the conditional ranker needs fewer attempts than marginal sampling
    let nb = find_row(&rows, Strategy::NaiveBayes, Regime::Ideal);
    let base = find_row(&rows, Strategy::Baseline, Regime::Ideal);
    assert!(
        nb.attempts_mean.unwrap() < base.attempts_mean.unwrap(),
        "naive bayes {} vs baseline {}",
        nb.attempts_mean.unwrap(),
        base.attempts_mean.unwrap()
    );
    // (d) under full constraints at least one strategy keeps a usable ASR
    let best_all = Strategy::ALL
        .into_iter()
        .map(|s| find_row(&rows, s, Regime::All).asr_disease.unwrap())
        .fold(0.0f64, f64::max);
    assert!(best_all >= 0.4, "best constrained ASR_disease {best_all}");

    let detail: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}/{}: asr_disease {:.3} asr_all {:.3} attempts {:.0}",
                r.strategy,
                r.regime,
                r.asr_disease.unwrap(),
                r.asr_all.unwrap(),
                r.attempts_mean.unwrap()
            )
        })
        .collect();
    pass("c6", detail.join("; "));
}

#[test]
fn criterion_07_soundness_under_perfect_oracle() {
    let cfg = PrefixExperimentConfig {
        use_debug_judge: true,
        strategies: vec![Strategy::Baseline],
        regimes: vec![Regime::Ideal],
        node: NodeConfig {
            timing: TimingParams::default().noise_free(),
            ..NodeConfig::default()
        },
        ..PrefixExperimentConfig::default()
    };
    let template = PromptTemplate::build(&cfg.template).unwrap();
    let mut corpus_rng = rng(cfg.seed);
    corpus_rng.set_stream(0);
    let corpus = generate_prefix_corpus(&cfg.corpus, &mut corpus_rng);
    let model = train_corpus_model(&corpus).unwrap();

    let mut recovered = 0usize;
    let mut reachable = 0usize;
    let mut false_matches = 0usize;
    for i in 0..cfg.victims {
        let run = run_one_prefix_victim(
            &cfg,
            &template,
            &model,
            &corpus,
            None,
            Strategy::Baseline,
            Regime::Ideal,
            i,
        )
        .unwrap();
        // Victims come from the corpus the model was trained on, so every
        // field value sits in some candidate pool.
        reachable += 1;
        if run.all_correct() {
            recovered += 1;
        }
        for (slot, claim) in run.report.claimed.iter().enumerate() {
            if claim.is_some() && !run.field_correct[slot] {
                false_matches += 1;
            }
        }
    }
    assert_eq!(reachable, cfg.victims);
    assert_eq!(recovered, cfg.victims, "exact recovery failed");
    assert_eq!(false_matches, 0, "wrong field values were marked matched");
    pass(
        "c7",
        format!("{recovered}/{} victims recovered exactly, 0 false matches", cfg.victims),
    );
}

#[test]
fn criterion_08_semantic_attack_success_rates() {
    let cfg = SemanticExperimentConfig::default(); // 13 x 30 victims, budgets 50/200/500
    let rows = run_semantic_experiment(&cfg).unwrap();

    let overall_at = |budget: u64| {
        rows.iter()
            .find(|r| r.category == "overall" && r.budget_probes == Some(budget))
            .unwrap()
            .asr
            .unwrap()
    };
    let (o50, o200, o500) = (overall_at(50), overall_at(200), overall_at(500));
    assert!(o50 <= o200 + 1e-12 && o200 <= o500 + 1e-12, "not monotone: {o50} {o200} {o500}");
    assert!(o500 >= 0.70, "overall ASR {o500}");

    let mut worst = ("", 1.0f64);
    for row in rows.iter().filter(|r| r.budget_probes == Some(500) && r.category != "overall") {
        let asr = row.asr.unwrap();
        if asr < worst.1 {
            worst = (&row.category, asr);
        }
        assert!(asr >= 0.43, "category {} ASR {asr}", row.category);
    }
    pass(
        "c8",
        format!(
            "overall ASR {o50:.3}/{o200:.3}/{o500:.3} at budgets 50/200/500; weakest category {} at {:.3}",
            worst.0, worst.1
        ),
    );
}

#[test]
fn criterion_09_defense_suite() {
    // Isolation: cross-user sharing gone, the attack recovers nothing.
    let base = PrefixExperimentConfig {
        victims: 50,
        strategies: vec![Strategy::NaiveBayes],
        regimes: vec![Regime::All],
        ..PrefixExperimentConfig::default()
    };
    let rows = run_defense_eval(&DefenseEvalConfig {
        base: base.clone(),
        defenses: vec![Defense::None, Defense::Isolation, Defense::DelayInjection],
        delay_sigma_multiplier: 5.0,
    })
    .unwrap();
    let by_defense = |name: &str| rows.iter().find(|r| r.defense == name).unwrap();

    let undefended = by_defense("none");
    let isolated = by_defense("isolation");
    assert_eq!(isolated.asr_all.unwrap(), 0.0, "isolation must zero ASR_all");

    // Delay injection at five block-gaps drowns per-probe decisions; the
    // sequential attack collapses well below chance-level field recovery.
    let delayed = by_defense("delay_injection");
    assert!(
        delayed.field_recovery.unwrap() <= 0.6,
        "delayed field recovery {}",
        delayed.field_recovery.unwrap()
    );
    assert!(undefended.field_recovery.unwrap() > delayed.field_recovery.unwrap());

    // Rate limiter: request 5001 in one virtual minute is rejected and
    // leaves cache state untouched.
    let mut node = ServingNode::new(NodeConfig::default());
    let mut r = rng(90);
    let t = VirtualInstant::EPOCH + VirtualDuration::from_secs(1);
    for i in 0..5_000u64 {
        let prompt = TokenSeq::from_raw((0..16).map(|j| (1_000 * i + j + 1).into()).collect());
        node.submit(VICTIM_USER, &prompt, 1, t, &mut r).unwrap();
    }
    let stats_before = node.prefix_stats().unwrap();
    let rejected = node.submit(
        VICTIM_USER,
        &TokenSeq::from_raw((1..17u64).map(|j| (j * 77_777).into()).collect()),
        1,
        t,
        &mut r,
    );
    assert!(rejected.is_err(), "request 5001 must be rate limited");
    assert_eq!(node.prefix_stats().unwrap(), stats_before);
    pass(
        "c9",
        format!(
            "isolation ASR_all 0; delay field recovery {:.3} (undefended {:.3}); request 5001 rejected with stats unchanged",
            delayed.field_recovery.unwrap(),
            undefended.field_recovery.unwrap()
        ),
    );
}

#[test]
fn criterion_10_cli_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg_path,
        r#"
seed = 23
experiment_id = "determinism"
[prefix_corpus]
n_records = 400
[prefix_attack]
victims = 10
strategies = ["baseline", "naive_bayes"]
regimes = ["all"]
[semantic_corpus]
n_categories = 3
records_per_category = 8
[semantic_attack]
victims_per_category = 3
probe_budgets = [40]
target_leaves = 3
"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_cacheprobe");
    for sub in ["attack-prefix", "attack-semantic"] {
        let out_a = dir.path().join(format!("{sub}-a.csv"));
        let out_b = dir.path().join(format!("{sub}-b.csv"));
        for out in [&out_a, &out_b] {
            let status = std::process::Command::new(bin)
                .args([sub, "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(out)
                .status()
                .unwrap();
            assert_eq!(status.code(), Some(0));
        }
        let a = std::fs::read(&out_a).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(&out_b).unwrap(), "{sub} runs differ");
    }
    pass("c10", "attack-prefix and attack-semantic reports byte-identical across reruns".into());
}

/// Attack modules never touch the ground-truth channel; only harness
/// scoring does.
#[test]
fn scoring_isolation_attack_sources_never_read_debug_truth() {
    let prefix_src = include_str!("../src/attack/prefix.rs");
    let semantic_src = include_str!("../src/attack/semantic.rs");
    let analyzer_src = include_str!("../src/analyzer.rs");
    for (name, src) in [
        ("attack/prefix.rs", prefix_src),
        ("attack/semantic.rs", semantic_src),
        ("analyzer.rs", analyzer_src),
    ] {
        assert!(
            !src.contains("debug_truth"),
            "{name} must not consult the debug channel"
        );
    }
}

/// Sweep of the semantic search knobs at a reduced scale: every setting
/// stays deterministic and keeps a usable success rate, and the gate keeps
/// its diversity guarantee.
#[test]
fn semantic_search_parameter_sweep() {
    use cacheprobe::attack::semantic::SearchParams;
    let base = SemanticExperimentConfig {
        victims_per_category: 4,
        probe_budgets: vec![80],
        corpus: cacheprobe::harness::corpus::SemanticCorpusSpec {
            n_categories: 4,
            records_per_category: 12,
            ..Default::default()
        },
        target_leaves: 4,
        ..SemanticExperimentConfig::default()
    };
    let sweep = [
        SearchParams::default(),
        SearchParams {
            w_rep: 2.0,
            w_hist: 0.0,
            ..SearchParams::default()
        },
        SearchParams {
            w_clu: 1.5,
            explore_p: 0.05,
            ..SearchParams::default()
        },
        SearchParams {
            delta_div: 0.9,
            novelty_u: 2.0,
            ..SearchParams::default()
        },
    ];
    let mut details = Vec::new();
    for params in sweep {
        let cfg = SemanticExperimentConfig {
            search: params,
            ..base.clone()
        };
        let rows = run_semantic_experiment(&cfg).unwrap();
        let again = run_semantic_experiment(&cfg).unwrap();
        assert_eq!(rows, again, "sweep point not deterministic");
        let overall = rows.iter().find(|r| r.category == "overall").unwrap();
        let asr = overall.asr.unwrap();
        assert!(asr > 0.3, "sweep point collapsed: {params:?} -> {asr}");
        details.push(format!(
            "w_rep={} w_hist={} w_clu={} delta={} explore={} -> asr {asr:.3}",
            params.w_rep, params.w_hist, params.w_clu, params.delta_div, params.explore_p
        ));
    }
    pass("sweep", details.join("; "));
}

/// The constant-time defense also blanks the block-level channel end to end.
#[test]
fn constant_time_defense_defeats_calibration_fit() {
    let template = PromptTemplate::build(&Default::default()).unwrap();
    let node_cfg = apply_defense(
        &NodeConfig::default(),
        Defense::ConstantTime,
        &template,
        5.0,
    );
    let mut node = ServingNode::new(node_cfg);
    let mut r = rng(91);
    let profile = calibrate(&mut node, ATTACKER_USER, 800, 5, 400, &mut r).unwrap();
    let predictor = fit(&profile, PredictorKind::CurveBayes).unwrap();
    // Every level reads identically, so decisions carry no signal: posterior
    // mass cannot follow the true k.
    let params = TimingParams::default().noise_free();
    let ttft = cacheprobe::timing::prefill_time_exact(800, 0, &params);
    let sees_everything = predictor.predict_block_hits(ttft, 800);
    let flat_spread = sees_everything.candidates.len();
    assert!(flat_spread > 10, "posterior should be near-uniform, got {flat_spread} candidates");
    let _ = tokenize("warmup"); // keep the model module linked into this test
}
