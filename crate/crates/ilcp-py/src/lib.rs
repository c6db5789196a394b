//! Python bindings for the handover-prediction toolkit: scenario traces,
//! model checkpoints, training, the metric suite, and the latent-payload
//! codec.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::Path;

use ilcp::eval::{self, EvalConfig, EvalMode, ExperimentInputs};
use ilcp::graph::CellIndex;
use ilcp::model::{ModelConfig, ModelParams};
use ilcp::rules::{run_rule, RuleConfig};
use ilcp::synthgen::{generate, ScenarioConfig};
use ilcp::trace::{
    extract_handover_events, fit_normalization, parse_trace, split_by_trajectory, write_trace,
    Topology, UeId,
};
use ilcp::trainer::{self, TrainConfig};
use ilcp::xn::{deserialize_latent, serialize_latent, LATENT_DIM};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A measurement trace with its cell topology and reference serving labels.
#[pyclass]
#[derive(Clone)]
struct Trace {
    inner: ilcp::trace::Trace,
}

#[pymethods]
impl Trace {
    /// Generates a synthetic scenario from a JSON config (all fields
    /// optional).
    #[staticmethod]
    fn generate(config_json: &str) -> PyResult<Trace> {
        let cfg: ScenarioConfig = serde_json::from_str(config_json).map_err(err)?;
        Ok(Trace {
            inner: generate(&cfg).map_err(err)?,
        })
    }

    /// Loads `trace.csv` + `topology.json` from a scenario directory.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Trace> {
        let dir = Path::new(dir);
        let topology = Topology::load(&dir.join("topology.json")).map_err(err)?;
        Ok(Trace {
            inner: parse_trace(&dir.join("trace.csv"), topology).map_err(err)?,
        })
    }

    /// Writes `trace.csv` + `topology.json` into a directory.
    fn save(&self, dir: &str) -> PyResult<()> {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir).map_err(err)?;
        self.inner
            .topology
            .save(&dir.join("topology.json"))
            .map_err(err)?;
        write_trace(&self.inner, &dir.join("trace.csv")).map_err(err)
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.steps.len()
    }

    fn ue_ids(&self) -> Vec<u32> {
        self.inner.ue_ids().iter().map(|u| u.0).collect()
    }

    /// Reference handover events as (t_star, ue, source_cell, target_cell).
    fn handover_events(&self) -> Vec<(u64, u32, u32, u32)> {
        extract_handover_events(&self.inner)
            .iter()
            .map(|e| (e.t_star, e.ue.0, e.source.0, e.target.0))
            .collect()
    }

    /// Serving-cell changepoints from the A3/A5 rule with default
    /// parameters, as (t_star, ue, source_cell, target_cell).
    fn rule_events(&self) -> Vec<(u64, u32, u32, u32)> {
        let (_, events) = run_rule(&self.inner, &RuleConfig::default());
        events
            .iter()
            .map(|e| (e.t_star, e.ue.0, e.source.0, e.target.0))
            .collect()
    }

    fn restrict(&self, ues: Vec<u32>) -> Trace {
        let ues: Vec<UeId> = ues.into_iter().map(UeId).collect();
        Trace {
            inner: self.inner.restrict(&ues, self.inner.split_tag),
        }
    }
}

/// Model parameters (architecture + weights); the unit of checkpointing.
#[pyclass]
struct Model {
    inner: ModelParams,
}

#[pymethods]
impl Model {
    /// Fresh deterministic initialization. `toy` selects the small
    /// architecture used by smoke tests.
    #[staticmethod]
    #[pyo3(signature = (n_cells, seed, toy=false))]
    fn init(n_cells: usize, seed: u64, toy: bool) -> PyResult<Model> {
        let cfg = if toy {
            ModelConfig::toy(n_cells)
        } else {
            ModelConfig::standard(n_cells)
        };
        Ok(Model {
            inner: ModelParams::init(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model {
            inner: ModelParams::load(Path::new(path)).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(err)
    }

    /// (state width, latent width, number of cells).
    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        (
            self.inner.config.d_h,
            self.inner.config.d_z,
            self.inner.config.n_cells,
        )
    }

    /// Post-handover accuracy (percent) at offset `delta` for
    /// mode "cold", "warm" or "ilcp".
    #[pyo3(signature = (trace, delta=0, mode="ilcp", big_delta=10, state_horizon=64))]
    fn accuracy_at(
        &self,
        trace: &Trace,
        delta: u64,
        mode: &str,
        big_delta: u64,
        state_horizon: usize,
    ) -> PyResult<f64> {
        let mode = parse_mode(mode)?;
        let stats = fit_normalization(&trace.inner).map_err(err)?;
        let index = CellIndex::new(&trace.inner.topology);
        let events = extract_handover_events(&trace.inner);
        let out = eval::acc_at_delta(
            &self.inner,
            &trace.inner,
            &stats,
            &index,
            &events,
            delta,
            big_delta,
            state_horizon,
            mode,
        )
        .map_err(err)?;
        Ok(out.accuracy_pct)
    }
}

fn parse_mode(mode: &str) -> PyResult<EvalMode> {
    match mode {
        "cold" => Ok(EvalMode::Cold),
        "warm" => Ok(EvalMode::Warm),
        "ilcp" => Ok(EvalMode::Ilcp),
        other => Err(PyValueError::new_err(format!(
            "unknown mode `{other}` (expected cold, warm or ilcp)"
        ))),
    }
}

/// Trains a checkpoint on a 70/15/15 trajectory split of `trace`.
/// `config_json` overrides the built-in recipe; returns
/// (best validation Acc@0 in percent, epochs run). Artifacts
/// (best.ckpt, training_log.csv) land in `out_dir`.
#[pyfunction]
#[pyo3(signature = (trace, out_dir, config_json="{}", toy=false))]
fn train(trace: &Trace, out_dir: &str, config_json: &str, toy: bool) -> PyResult<(f64, usize)> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(err)?;
    let (tr, val, _) =
        split_by_trajectory(&trace.inner, (0.7, 0.15, 0.15), cfg.seed).map_err(err)?;
    let stats = fit_normalization(&tr).map_err(err)?;
    let index = CellIndex::new(&trace.inner.topology);
    let model_cfg = if toy {
        ModelConfig::toy(index.len())
    } else {
        ModelConfig::standard(index.len())
    };
    let outcome = trainer::fit(model_cfg, &tr, &val, &stats, &index, &cfg, Path::new(out_dir))
        .map_err(err)?;
    Ok((outcome.best_val_acc, outcome.epochs_run))
}

/// Runs the full metric battery; writes report.json and the curve CSVs to
/// `out_dir` and returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (model, trace, out_dir, config_json="{}", zero_knowledge=None))]
fn evaluate(
    model: &Model,
    trace: &Trace,
    out_dir: &str,
    config_json: &str,
    zero_knowledge: Option<&Model>,
) -> PyResult<String> {
    let cfg: EvalConfig = serde_json::from_str(config_json).map_err(err)?;
    let stats = fit_normalization(&trace.inner).map_err(err)?;
    let index = CellIndex::new(&trace.inner.topology);
    let report = eval::run_experiment(
        &ExperimentInputs {
            ilcp: &model.inner,
            zero_knowledge: zero_knowledge.map(|m| &m.inner),
            test: &trace.inner,
            stats: &stats,
            index: &index,
            rule: &RuleConfig::default(),
            config: &cfg,
        },
        Path::new(out_dir),
    )
    .map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(err)
}

/// Serializes 32 latent values into the 128-byte wire payload.
#[pyfunction]
fn encode_payload(values: Vec<f32>) -> PyResult<Vec<u8>> {
    let arr: [f32; LATENT_DIM] = values
        .try_into()
        .map_err(|v: Vec<f32>| PyValueError::new_err(format!("expected 32 values, got {}", v.len())))?;
    Ok(serialize_latent(&arr).map_err(err)?.to_vec())
}

/// Decodes a 128-byte wire payload into its 32 latent values.
#[pyfunction]
fn decode_payload(payload: Vec<u8>) -> PyResult<Vec<f32>> {
    Ok(deserialize_latent(&payload).map_err(err)?.to_vec())
}

#[pymodule]
fn ilcp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trace>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(encode_payload, m)?)?;
    m.add_function(wrap_pyfunction!(decode_payload, m)?)?;
    m.add("LATENT_DIM", LATENT_DIM)?;
    m.add("PAYLOAD_BYTES", ilcp::xn::PAYLOAD_BYTES)?;
    Ok(())
}
