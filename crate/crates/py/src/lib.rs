//! Python bindings for the cacheprobe simulation lab.
//!
//! Exposes the deterministic tokenizer and embedding, a serving-node
//! wrapper with an internal virtual clock, and the two experiment runners
//! (results come back as CSV text, same bytes as the CLI writes).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use cacheprobe::harness::config::LabConfig;
use cacheprobe::harness::experiment::{run_prefix_experiment, run_semantic_experiment};
use cacheprobe::harness::report::rows_to_csv;
use cacheprobe::node::{CacheMode, RequestOutcome, ServingNode};
use cacheprobe::time::VirtualDuration;

/// Deterministic whitespace/punctuation tokenizer; returns stable ids.
#[pyfunction]
fn tokenize(text: &str) -> Vec<u64> {
    cacheprobe::model::tokenize(text).tokens.into_iter().map(|t| t.0).collect()
}

/// Hashed character-trigram embedding, L2-normalized, 256 dimensions.
#[pyfunction]
fn embed(text: &str) -> Vec<f64> {
    cacheprobe::semantic_cache::embed(text).0
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors must share a dimension"));
    }
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
}

fn parse_config(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<LabConfig> {
    let mut cfg = match config_toml {
        Some(text) => LabConfig::from_toml(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => LabConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// A simulated serving node on its own virtual clock. Each submit advances
/// the clock by a small think time plus the simulated latency, so repeated
/// calls behave like a paced client.
#[pyclass]
struct SimNode {
    node: ServingNode,
    rng: ChaCha12Rng,
    last: Option<RequestOutcome>,
}

#[pymethods]
impl SimNode {
    /// Args: cache_mode ("prefix" | "semantic" | "both"), seed, optional
    /// lab-config TOML, and whether the ground-truth channel is enabled.
    #[new]
    #[pyo3(signature = (cache_mode="prefix", seed=7, config_toml=None, debug=false))]
    fn new(cache_mode: &str, seed: u64, config_toml: Option<&str>, debug: bool) -> PyResult<Self> {
        let mode = match cache_mode {
            "prefix" => CacheMode::Prefix,
            "semantic" => CacheMode::Semantic,
            "both" => CacheMode::Both,
            other => {
                return Err(PyValueError::new_err(format!("unknown cache_mode {other:?}")))
            }
        };
        let cfg = parse_config(config_toml, Some(seed))?;
        let mut node_cfg = cfg.node_config(mode);
        node_cfg.debug_enabled = debug;
        Ok(SimNode {
            node: ServingNode::new(node_cfg),
            rng: ChaCha12Rng::seed_from_u64(seed),
            last: None,
        })
    }

    /// Serves one request; returns {ttft_s, token_times_s, text,
    /// total_latency_s}. Raises RuntimeError when rate limited.
    fn submit<'py>(
        &mut self,
        py: Python<'py>,
        user: u64,
        text: &str,
        gen_tokens: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let now = self.node.now() + VirtualDuration::from_secs_f64(0.01);
        let outcome = self
            .node
            .submit_text(user, text, gen_tokens, now, &mut self.rng)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.node
            .advance_clock(VirtualDuration::from_secs_f64(outcome.total_latency_s));
        let dict = PyDict::new(py);
        dict.set_item("ttft_s", outcome.ttft_s)?;
        dict.set_item("token_times_s", outcome.token_times_s.clone())?;
        dict.set_item("text", outcome.response_text.clone())?;
        dict.set_item("total_latency_s", outcome.total_latency_s)?;
        self.last = Some(outcome);
        Ok(dict)
    }

    /// Moves the virtual clock forward, expiring stale cache entries.
    fn advance(&mut self, seconds: f64) {
        self.node.advance_clock(VirtualDuration::from_secs_f64(seconds));
    }

    /// Ground truth of the last outcome as (k_blocks, semantic_hit). Only
    /// available on debug-enabled nodes.
    fn last_debug(&self) -> PyResult<(usize, bool)> {
        let outcome = self
            .last
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("no request served yet"))?;
        let info = self
            .node
            .debug_truth(outcome)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((info.k_blocks, info.semantic_hit))
    }

    fn now_s(&self) -> f64 {
        self.node.now().as_secs_f64()
    }
}

/// Runs the structured-form attack experiment; returns the report CSV.
#[pyfunction]
#[pyo3(signature = (config_toml=None, seed=None))]
fn prefix_experiment_csv(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = parse_config(config_toml, seed)?;
    let rows = run_prefix_experiment(&cfg.prefix_experiment())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    rows_to_csv(&rows).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs the semantic-cache attack experiment; returns the report CSV.
#[pyfunction]
#[pyo3(signature = (config_toml=None, seed=None))]
fn semantic_experiment_csv(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = parse_config(config_toml, seed)?;
    let rows = run_semantic_experiment(&cfg.semantic_experiment())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    rows_to_csv(&rows).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn cacheprobe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(prefix_experiment_csv, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_experiment_csv, m)?)?;
    m.add_class::<SimNode>()?;
    Ok(())
}
