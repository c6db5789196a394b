//! Measurement-trace data model: CSV ingestion, validation, trajectory
//! splitting, and per-cell feature normalization.
//!
//! A trace is the ground-truth substrate: time-indexed per-(UE, cell) radio
//! measurements (RSRP/RSRQ/SINR) with a serving-cell flag. One step is 10 ms.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Opaque cell identifier, unique within a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

/// Opaque UE identifier, unique within a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UeId(pub u32);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One measurement row: UE `ue` sees cell `cell` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub t: u64,
    pub ue: UeId,
    pub cell: CellId,
    pub rsrp: f64,
    pub rsrq: f64,
    pub sinr: f64,
    pub is_serving: bool,
}

/// Number of per-edge measurement features (rsrp, rsrq, sinr).
pub const N_FEATURES: usize = 3;

impl TraceStep {
    pub fn features(&self) -> [f64; N_FEATURES] {
        [self.rsrp, self.rsrq, self.sinr]
    }
}

/// A cell site with its static position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSite {
    pub id: CellId,
    pub x_m: f64,
    pub y_m: f64,
}

/// Deployment topology: cell positions and the static Xn neighbor edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub cells: Vec<CellSite>,
    pub xn_edges: Vec<(CellId, CellId)>,
}

impl Topology {
    pub fn cell_ids(&self) -> Vec<CellId> {
        self.cells.iter().map(|c| c.id).collect()
    }

    pub fn site(&self, id: CellId) -> Option<&CellSite> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn load(path: &Path) -> Result<Topology> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Which split a trace belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// An ordered, validated measurement trace.
///
/// Invariants: steps sorted by (t, ue, cell); no duplicate (t, ue, cell);
/// exactly one serving row per (t, ue) among rows where the UE is visible.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub topology: Topology,
    pub split_tag: Split,
}

/// A serving-cell change for one UE: c_u(t*-1)=source, c_u(t*)=target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandoverEvent {
    pub t_star: u64,
    pub ue: UeId,
    pub source: CellId,
    pub target: CellId,
}

impl Trace {
    /// Validates invariants and sorts rows; fails on duplicates or
    /// serving-flag violations.
    pub fn new(mut steps: Vec<TraceStep>, topology: Topology, split_tag: Split) -> Result<Trace> {
        steps.sort_by_key(|s| (s.t, s.ue, s.cell));
        for w in steps.windows(2) {
            if (w[0].t, w[0].ue, w[0].cell) == (w[1].t, w[1].ue, w[1].cell) {
                return Err(Error::DuplicateStep {
                    t: w[0].t,
                    ue: w[0].ue,
                    cell: w[0].cell,
                });
            }
        }
        for s in &steps {
            if !s.rsrp.is_finite() {
                return Err(Error::ServingViolation {
                    t: s.t,
                    ue: s.ue,
                    msg: format!("non-finite rsrp for cell {}", s.cell),
                });
            }
        }
        // One serving row per (t, ue) group.
        let mut i = 0;
        while i < steps.len() {
            let (t, ue) = (steps[i].t, steps[i].ue);
            let mut serving = 0usize;
            let mut j = i;
            while j < steps.len() && steps[j].t == t && steps[j].ue == ue {
                if steps[j].is_serving {
                    serving += 1;
                }
                j += 1;
            }
            if serving != 1 {
                return Err(Error::ServingViolation {
                    t,
                    ue,
                    msg: format!("{serving} serving cells flagged, expected exactly 1"),
                });
            }
            i = j;
        }
        Ok(Trace {
            steps,
            topology,
            split_tag,
        })
    }

    pub fn ue_ids(&self) -> Vec<UeId> {
        let mut ids: Vec<UeId> = self.steps.iter().map(|s| s.ue).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn time_range(&self) -> Option<(u64, u64)> {
        let lo = self.steps.first()?.t;
        let hi = self.steps.last()?.t;
        Some((lo, hi))
    }

    /// Serving-cell sequence c_u(t) for one UE, in time order.
    pub fn serving_sequence(&self, ue: UeId) -> Vec<(u64, CellId)> {
        self.steps
            .iter()
            .filter(|s| s.ue == ue && s.is_serving)
            .map(|s| (s.t, s.cell))
            .collect()
    }

    /// All rows visible to `ue` at time `t`.
    pub fn rows_at(&self, t: u64, ue: UeId) -> Vec<&TraceStep> {
        // Steps are sorted by (t, ue, cell), so the group is contiguous.
        let start = self.steps.partition_point(|s| (s.t, s.ue) < (t, ue));
        let end = self.steps.partition_point(|s| (s.t, s.ue) <= (t, ue));
        self.steps[start..end].iter().collect()
    }

    /// Returns a copy restricted to the given UEs, retagged as `split`.
    pub fn restrict(&self, ues: &[UeId], split: Split) -> Trace {
        Trace {
            steps: self
                .steps
                .iter()
                .filter(|s| ues.contains(&s.ue))
                .copied()
                .collect(),
            topology: self.topology.clone(),
            split_tag: split,
        }
    }
}

pub const TRACE_HEADER: &str = "t,ue_id,cell_id,rsrp_dbm,rsrq_db,sinr_db,is_serving";

/// Parses the trace CSV format, enforcing all trace invariants.
pub fn parse_trace(path: &Path, topology: Topology) -> Result<Trace> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut steps = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim() != TRACE_HEADER {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("bad header, expected `{TRACE_HEADER}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            line: lineno,
            msg: format!("malformed {what}"),
        };
        let t: u64 = fields[0].trim().parse().map_err(|_| parse_err("t"))?;
        let ue: u32 = fields[1].trim().parse().map_err(|_| parse_err("ue_id"))?;
        let cell: u32 = fields[2].trim().parse().map_err(|_| parse_err("cell_id"))?;
        let rsrp: f64 = fields[3].trim().parse().map_err(|_| parse_err("rsrp_dbm"))?;
        let rsrq: f64 = fields[4].trim().parse().map_err(|_| parse_err("rsrq_db"))?;
        let sinr: f64 = fields[5].trim().parse().map_err(|_| parse_err("sinr_db"))?;
        let is_serving = match fields[6].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("is_serving must be 0 or 1, found `{other}`"),
                })
            }
        };
        steps.push(TraceStep {
            t,
            ue: UeId(ue),
            cell: CellId(cell),
            rsrp,
            rsrq,
            sinr,
            is_serving,
        });
    }
    Trace::new(steps, topology, Split::Train)
}

/// Writes the trace CSV; floats use shortest round-trip formatting so a
/// generate -> write -> parse cycle is lossless.
pub fn write_trace(trace: &Trace, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TRACE_HEADER}")?;
    for s in &trace.steps {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            s.t,
            s.ue,
            s.cell,
            s.rsrp,
            s.rsrq,
            s.sinr,
            if s.is_serving { 1 } else { 0 }
        )?;
    }
    Ok(())
}

/// Per-(cell, feature) normalization statistics, fit on the train split only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    per_cell: BTreeMap<CellId, [(f64, f64); N_FEATURES]>,
    global: [(f64, f64); N_FEATURES],
}

const STD_FLOOR: f64 = 1e-6;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Population (1/N) variance convention.
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Fits per-cell, per-feature mean/std on the given (train) trace.
/// Cells absent from the trace fall back to the global statistics.
pub fn fit_normalization(trace: &Trace) -> Result<NormalizationStats> {
    if trace.steps.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut by_cell: BTreeMap<CellId, [Vec<f64>; N_FEATURES]> = BTreeMap::new();
    let mut all: [Vec<f64>; N_FEATURES] = Default::default();
    for s in &trace.steps {
        let entry = by_cell.entry(s.cell).or_default();
        for (k, v) in s.features().into_iter().enumerate() {
            entry[k].push(v);
            all[k].push(v);
        }
    }
    let per_cell = by_cell
        .into_iter()
        .map(|(cell, feats)| {
            let mut stats = [(0.0, 0.0); N_FEATURES];
            for k in 0..N_FEATURES {
                stats[k] = mean_std(&feats[k]);
            }
            (cell, stats)
        })
        .collect();
    let mut global = [(0.0, 0.0); N_FEATURES];
    for k in 0..N_FEATURES {
        global[k] = mean_std(&all[k]);
    }
    Ok(NormalizationStats { per_cell, global })
}

impl NormalizationStats {
    pub fn stats_for(&self, cell: CellId) -> &[(f64, f64); N_FEATURES] {
        self.per_cell.get(&cell).unwrap_or(&self.global)
    }

    /// (x - mean) / std per feature; unseen cells use the global fallback.
    pub fn apply(&self, cell: CellId, features: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let st = self.stats_for(cell);
        let mut out = [0.0; N_FEATURES];
        for k in 0..N_FEATURES {
            out[k] = (features[k] - st[k].0) / st[k].1;
        }
        out
    }
}

/// Every index where c_u(t) changes yields one event.
pub fn extract_handover_events(trace: &Trace) -> Vec<HandoverEvent> {
    let mut events = Vec::new();
    for ue in trace.ue_ids() {
        let seq = trace.serving_sequence(ue);
        for w in seq.windows(2) {
            if w[0].1 != w[1].1 {
                events.push(HandoverEvent {
                    t_star: w[1].0,
                    ue,
                    source: w[0].1,
                    target: w[1].1,
                });
            }
        }
    }
    events.sort_by_key(|e| (e.t_star, e.ue));
    events
}

/// Partitions UEs into contiguous-trajectory splits by step-weighted greedy
/// assignment after a seeded shuffle. Ratios default to 70/15/15.
pub fn split_by_trajectory(
    trace: &Trace,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Trace, Trace, Trace)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let (r_train, r_val, r_test) = ratios;
    let total = r_train + r_val + r_test;
    if !(total > 0.0) || r_train <= 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "bad split ratios {ratios:?}"
        )));
    }
    let mut ues = trace.ue_ids();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ues.shuffle(&mut rng);

    let counts: BTreeMap<UeId, usize> = {
        let mut m = BTreeMap::new();
        for s in &trace.steps {
            *m.entry(s.ue).or_insert(0) += 1;
        }
        m
    };
    let total_steps: usize = counts.values().sum();
    let target_val = (r_val / total * total_steps as f64).round() as usize;
    let target_test = (r_test / total * total_steps as f64).round() as usize;

    let (mut val_ues, mut test_ues, mut train_ues) = (Vec::new(), Vec::new(), Vec::new());
    let (mut val_n, mut test_n) = (0usize, 0usize);
    for ue in ues {
        let n = counts[&ue];
        if val_n < target_val {
            val_ues.push(ue);
            val_n += n;
        } else if test_n < target_test {
            test_ues.push(ue);
            test_n += n;
        } else {
            train_ues.push(ue);
        }
    }
    if train_ues.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    Ok((
        trace.restrict(&train_ues, Split::Train),
        trace.restrict(&val_ues, Split::Val),
        trace.restrict(&test_ues, Split::Test),
    ))
}
