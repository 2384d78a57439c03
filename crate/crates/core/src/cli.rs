//! Command-line interface: calibration, the two end-to-end attacks, the
//! defense sweep, and report aggregation. Exit code 0 on success, 2 on
//! configuration errors, 1 on runtime failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::analyzer::{calibrate, fit, PredictorKind};
use crate::harness::config::LabConfig;
use crate::harness::experiment::{
    run_defense_eval, run_prefix_experiment, run_semantic_experiment, ATTACKER_USER,
};
use crate::harness::report::{read_report, write_report, write_report_jsonl, ReportRow};
use crate::node::{CacheMode, ServingNode};

#[derive(Parser)]
#[command(
    name = "cacheprobe",
    version,
    about = "Timing side-channel lab for LLM serving caches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the timing analyzer against a fresh node and write the
    /// fitted predictor as JSON.
    Calibrate {
        /// Lab config file (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Prompt length in tokens to calibrate for.
        #[arg(long, default_value_t = 800)]
        n: usize,
        /// Calibration query budget override.
        #[arg(long)]
        budget: Option<usize>,
        /// Predictor kind: curve_bayes, nearest_level or boosted_stumps.
        #[arg(long)]
        kind: Option<String>,
        /// Output path for the predictor JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the end-to-end structured-form attack and write a CSV report.
    AttackPrefix {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSON-lines mirror of the report.
        #[arg(long)]
        jsonl: Option<PathBuf>,
        /// Restrict to these strategies: baseline, naive_bayes, prob_vocab.
        #[arg(long)]
        strategy: Vec<String>,
        /// Restrict to these regimes: ideal, all.
        #[arg(long)]
        regime: Vec<String>,
    },
    /// Run the semantic-cache attack and write a CSV report.
    AttackSemantic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Sweep defenses over the prefix attack and write comparison rows.
    DefendEval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Aggregate one or more report CSVs into a summary table.
    Report {
        /// Input report CSVs.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Summary CSV path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_OK: i32 = 0;
const EXIT_RUNTIME: i32 = 1;
const EXIT_CONFIG: i32 = 2;

fn parse_strategy(s: &str) -> Result<crate::attack::prefix::Strategy, i32> {
    use crate::attack::prefix::Strategy;
    Strategy::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            eprintln!("config error: unknown strategy {s:?}");
            EXIT_CONFIG
        })
}

fn parse_regime(s: &str) -> Result<crate::harness::experiment::Regime, i32> {
    use crate::harness::experiment::Regime;
    [Regime::Ideal, Regime::All]
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| {
            eprintln!("config error: unknown regime {s:?}");
            EXIT_CONFIG
        })
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<LabConfig, i32> {
    let mut cfg = match path {
        Some(p) => LabConfig::load(p).map_err(|e| {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        })?,
        None => LabConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_outputs(
    rows: &[ReportRow],
    out: &Path,
    jsonl: &Option<PathBuf>,
) -> Result<(), i32> {
    write_report(rows, out).map_err(|e| {
        eprintln!("cannot write report: {e}");
        EXIT_RUNTIME
    })?;
    if let Some(jsonl) = jsonl {
        write_report_jsonl(rows, jsonl).map_err(|e| {
            eprintln!("cannot write jsonl report: {e}");
            EXIT_RUNTIME
        })?;
    }
    Ok(())
}

fn print_rows(rows: &[ReportRow]) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        println!(
            "{} {} strategy={} regime={} defense={} category={} victims={} \
             asr_disease={} asr_symptoms={} asr_all={} asr={} attempts={} tokens={} time_s={}",
            r.kind,
            r.experiment,
            if r.strategy.is_empty() { "-" } else { &r.strategy },
            if r.regime.is_empty() { "-" } else { &r.regime },
            if r.defense.is_empty() { "-" } else { &r.defense },
            if r.category.is_empty() { "-" } else { &r.category },
            r.victims,
            fmt(r.asr_disease),
            fmt(r.asr_symptoms),
            fmt(r.asr_all),
            fmt(r.asr),
            fmt(r.attempts_mean),
            fmt(r.tokens_mean),
            fmt(r.time_s_mean),
        );
    }
}

fn cmd_calibrate(
    config: Option<PathBuf>,
    seed: Option<u64>,
    n: usize,
    budget: Option<usize>,
    kind: Option<String>,
    out: PathBuf,
) -> i32 {
    let cfg = match load_config(&config, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let kind = match kind.as_deref() {
        None => cfg.analyzer.kind,
        Some("curve_bayes") => PredictorKind::CurveBayes,
        Some("nearest_level") => PredictorKind::NearestLevel,
        Some("boosted_stumps") => PredictorKind::BoostedStumps,
        Some(other) => {
            eprintln!("config error: unknown predictor kind {other:?}");
            return EXIT_CONFIG;
        }
    };
    let budget = budget.unwrap_or(cfg.analyzer.calibration_budget);
    let mut node = ServingNode::new(cfg.node_config(CacheMode::Prefix));
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let profile = match calibrate(&mut node, ATTACKER_USER, n, cfg.analyzer.reps_per_k, budget, &mut rng)
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("calibration failed: {e}");
            return EXIT_RUNTIME;
        }
    };
    let predictor = match fit(&profile, kind) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("fit failed: {e}");
            return EXIT_RUNTIME;
        }
    };
    if let Err(e) = std::fs::write(&out, predictor.to_json()) {
        eprintln!("cannot write predictor: {e}");
        return EXIT_RUNTIME;
    }
    println!(
        "calibrated kind={} n={} levels={} queries<={} -> {}",
        kind.name(),
        n,
        profile.levels.len(),
        budget,
        out.display()
    );
    EXIT_OK
}

/// Aggregates rows by their identity columns, averaging metrics weighted by
/// victim count.
fn summarize(rows: &[ReportRow]) -> Vec<ReportRow> {
    type Key = (String, String, String, String, String, Option<u64>);
    let mut groups: BTreeMap<Key, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.kind.clone(),
            r.strategy.clone(),
            r.regime.clone(),
            r.defense.clone(),
            r.category.clone(),
            r.budget_probes,
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((kind, strategy, regime, defense, category, budget), members)| {
            let victims: u64 = members.iter().map(|r| r.victims).sum();
            let wavg = |get: &dyn Fn(&ReportRow) -> Option<f64>| {
                let mut num = 0.0;
                let mut den = 0.0;
                for r in &members {
                    if let Some(v) = get(r) {
                        num += v * r.victims as f64;
                        den += r.victims as f64;
                    }
                }
                if den > 0.0 {
                    Some(num / den)
                } else {
                    None
                }
            };
            let mut row = ReportRow::empty("summary", &kind);
            row.strategy = strategy;
            row.regime = regime;
            row.defense = defense;
            row.category = category;
            row.victims = victims;
            row.asr_disease = wavg(&|r| r.asr_disease);
            row.asr_symptoms = wavg(&|r| r.asr_symptoms);
            row.asr_all = wavg(&|r| r.asr_all);
            row.asr = wavg(&|r| r.asr);
            row.field_recovery = wavg(&|r| r.field_recovery);
            row.attempts_mean = wavg(&|r| r.attempts_mean);
            row.tokens_mean = wavg(&|r| r.tokens_mean);
            row.time_s_mean = wavg(&|r| r.time_s_mean);
            row.probes_mean = wavg(&|r| r.probes_mean);
            row.budget_probes = budget;
            row
        })
        .collect()
}

fn cmd_report(inputs: Vec<PathBuf>, out: Option<PathBuf>) -> i32 {
    let mut rows = Vec::new();
    for path in &inputs {
        match read_report(path) {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return EXIT_RUNTIME;
            }
        }
    }
    let summary = summarize(&rows);
    match out {
        Some(path) => {
            if let Err(e) = write_report(&summary, &path) {
                eprintln!("cannot write summary: {e}");
                return EXIT_RUNTIME;
            }
            println!("aggregated {} rows -> {}", rows.len(), path.display());
        }
        None => print_rows(&summary),
    }
    EXIT_OK
}

/// Runs the CLI and returns the process exit code.
pub fn run<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Calibrate {
            config,
            seed,
            n,
            budget,
            kind,
            out,
        } => cmd_calibrate(config, seed, n, budget, kind, out),
        Command::AttackPrefix {
            config,
            seed,
            out,
            jsonl,
            strategy,
            regime,
        } => {
            let cfg = match load_config(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let mut experiment = cfg.prefix_experiment();
            if !strategy.is_empty() {
                match strategy.iter().map(|s| parse_strategy(s)).collect() {
                    Ok(strategies) => experiment.strategies = strategies,
                    Err(code) => return code,
                }
            }
            if !regime.is_empty() {
                match regime.iter().map(|r| parse_regime(r)).collect() {
                    Ok(regimes) => experiment.regimes = regimes,
                    Err(code) => return code,
                }
            }
            match run_prefix_experiment(&experiment) {
                Ok(rows) => {
                    if let Err(code) = write_outputs(&rows, &out, &jsonl) {
                        return code;
                    }
                    print_rows(&rows);
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("attack failed: {e}");
                    EXIT_RUNTIME
                }
            }
        }
        Command::AttackSemantic {
            config,
            seed,
            out,
            jsonl,
        } => {
            let cfg = match load_config(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_semantic_experiment(&cfg.semantic_experiment()) {
                Ok(rows) => {
                    if let Err(code) = write_outputs(&rows, &out, &jsonl) {
                        return code;
                    }
                    print_rows(&rows);
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("attack failed: {e}");
                    EXIT_RUNTIME
                }
            }
        }
        Command::DefendEval {
            config,
            seed,
            out,
            jsonl,
        } => {
            let cfg = match load_config(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_defense_eval(&cfg.defense_eval()) {
                Ok(rows) => {
                    if let Err(code) = write_outputs(&rows, &out, &jsonl) {
                        return code;
                    }
                    print_rows(&rows);
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("defense eval failed: {e}");
                    EXIT_RUNTIME
                }
            }
        }
        Command::Report { inputs, out } => cmd_report(inputs, out),
    }
}
