//! Dynamic heterogeneous graph snapshots and per-UE candidate sets.
//!
//! A snapshot holds UE nodes, cell nodes, the time-varying UE-cell
//! measurement edges (with normalized features) and the deployment-static
//! Xn edges. Candidate sets are the top-K visible cells by current RSRP.

use crate::error::{Error, Result};
use crate::trace::{CellId, NormalizationStats, Topology, Trace, UeId, N_FEATURES};

/// Candidate-set size K.
pub const CANDIDATE_K: usize = 8;

/// Number of measurement-edge features: normalized rsrp/rsrq/sinr plus the
/// serving flag.
pub const EDGE_FEATURES: usize = 4;

/// Stable mapping from CellId to embedding row and normalized position.
///
/// Cell identities enter the model only through this index, so relabeling
/// CellIds consistently permutes embeddings without changing anything else.
#[derive(Debug, Clone, PartialEq)]
pub struct CellIndex {
    ids: Vec<CellId>,
    /// Positions rescaled to [-0.5, 0.5] over the deployment extent.
    pos: Vec<(f64, f64)>,
    /// Undirected Xn pairs as indices into `ids`.
    xn: Vec<(usize, usize)>,
}

impl CellIndex {
    pub fn new(topology: &Topology) -> CellIndex {
        let mut sites = topology.cells.clone();
        sites.sort_by_key(|c| c.id);
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &sites {
            min_x = min_x.min(s.x_m);
            max_x = max_x.max(s.x_m);
            min_y = min_y.min(s.y_m);
            max_y = max_y.max(s.y_m);
        }
        let span_x = (max_x - min_x).max(1.0);
        let span_y = (max_y - min_y).max(1.0);
        let ids: Vec<CellId> = sites.iter().map(|s| s.id).collect();
        let pos = sites
            .iter()
            .map(|s| {
                (
                    (s.x_m - min_x) / span_x - 0.5,
                    (s.y_m - min_y) / span_y - 0.5,
                )
            })
            .collect();
        let mut xn = Vec::new();
        for &(a, b) in &topology.xn_edges {
            let ia = ids.binary_search(&a).expect("xn edge references unknown cell");
            let ib = ids.binary_search(&b).expect("xn edge references unknown cell");
            xn.push((ia.min(ib), ia.max(ib)));
        }
        xn.sort_unstable();
        xn.dedup();
        CellIndex { ids, pos, xn }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, idx: usize) -> CellId {
        self.ids[idx]
    }

    pub fn index_of(&self, id: CellId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn position(&self, idx: usize) -> (f64, f64) {
        self.pos[idx]
    }

    pub fn xn_pairs(&self) -> &[(usize, usize)] {
        &self.xn
    }
}

/// One UE-cell measurement edge with normalized features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasEdge {
    /// Index into the snapshot's UE list.
    pub ue: usize,
    /// Index into the cell index.
    pub cell: usize,
    /// [norm rsrp, norm rsrq, norm sinr, is_serving flag]
    pub feats: [f64; EDGE_FEATURES],
    /// Raw (unnormalized) RSRP, used for candidate ranking.
    pub raw_rsrp: f64,
}

/// One time-instant view of the heterogeneous RAN graph.
///
/// All deployed cells appear as nodes at every t; visibility shows up only
/// in the measurement edge set. Xn edges are deployment-static.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub t: u64,
    pub ues: Vec<UeId>,
    pub meas_edges: Vec<MeasEdge>,
    /// Serving cell index per UE, parallel to `ues`.
    pub serving: Vec<usize>,
}

/// Top-K visible candidate cells for one UE, descending current RSRP,
/// ties broken by ascending CellId. `mask[i]` is false for padded slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub ue: UeId,
    pub cells: Vec<CellId>,
    /// Indices into the cell index, parallel to `cells`.
    pub cell_indices: Vec<usize>,
    pub mask: [bool; CANDIDATE_K],
}

impl CandidateSet {
    pub fn contains(&self, cell: CellId) -> bool {
        self.cells.contains(&cell)
    }

    /// Slot of `cell` in the candidate list, if present.
    pub fn slot_of(&self, cell: CellId) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }
}

/// Builds the snapshot for every UE visible at time `t`.
pub fn build_snapshot(
    trace: &Trace,
    t: u64,
    stats: &NormalizationStats,
    index: &CellIndex,
) -> Result<GraphSnapshot> {
    let (lo, hi) = trace
        .time_range()
        .ok_or(Error::TimeOutOfRange { t, lo: 0, hi: 0 })?;
    if t < lo || t > hi {
        return Err(Error::TimeOutOfRange { t, lo, hi });
    }
    let start = trace.steps.partition_point(|s| s.t < t);
    let end = trace.steps.partition_point(|s| s.t <= t);
    let rows = &trace.steps[start..end];

    let mut ues: Vec<UeId> = rows.iter().map(|s| s.ue).collect();
    ues.sort_unstable();
    ues.dedup();

    let mut meas_edges = Vec::new();
    let mut serving = vec![usize::MAX; ues.len()];
    for s in rows {
        let ue_idx = ues.binary_search(&s.ue).unwrap();
        let cell_idx = index
            .index_of(s.cell)
            .unwrap_or_else(|| panic!("cell {} not in topology", s.cell));
        let norm = stats.apply(s.cell, &s.features());
        let mut feats = [0.0; EDGE_FEATURES];
        feats[..N_FEATURES].copy_from_slice(&norm);
        feats[N_FEATURES] = if s.is_serving { 1.0 } else { 0.0 };
        if s.is_serving {
            serving[ue_idx] = cell_idx;
        }
        meas_edges.push(MeasEdge {
            ue: ue_idx,
            cell: cell_idx,
            feats,
            raw_rsrp: s.rsrp,
        });
    }
    Ok(GraphSnapshot {
        t,
        ues,
        meas_edges,
        serving,
    })
}

/// Builds the per-UE subgraph snapshot (the UE's measurement edges plus all
/// cell nodes and Xn edges).
pub fn build_snapshot_for_ue(
    trace: &Trace,
    t: u64,
    ue: UeId,
    stats: &NormalizationStats,
    index: &CellIndex,
) -> Result<GraphSnapshot> {
    let rows = trace.rows_at(t, ue);
    if rows.is_empty() {
        return Err(Error::NoVisibleCells(ue));
    }
    let measurements: Vec<(CellId, [f64; N_FEATURES])> =
        rows.iter().map(|s| (s.cell, s.features())).collect();
    let serving = rows
        .iter()
        .find(|s| s.is_serving)
        .map(|s| s.cell)
        .ok_or(Error::ServingViolation {
            t,
            ue,
            msg: "no serving flag".into(),
        })?;
    snapshot_from_measurements(t, ue, &measurements, serving, stats, index)
}

/// Snapshot from an explicit measurement list and serving cell; the
/// closed-loop evaluation path uses this to override the serving relation.
pub fn snapshot_from_measurements(
    t: u64,
    ue: UeId,
    measurements: &[(CellId, [f64; N_FEATURES])],
    serving: CellId,
    stats: &NormalizationStats,
    index: &CellIndex,
) -> Result<GraphSnapshot> {
    if measurements.is_empty() {
        return Err(Error::NoVisibleCells(ue));
    }
    let mut meas_edges = Vec::with_capacity(measurements.len());
    let mut serving_idx = usize::MAX;
    for &(cell, feats_raw) in measurements {
        let cell_idx = index
            .index_of(cell)
            .unwrap_or_else(|| panic!("cell {cell} not in topology"));
        let norm = stats.apply(cell, &feats_raw);
        let mut feats = [0.0; EDGE_FEATURES];
        feats[..N_FEATURES].copy_from_slice(&norm);
        feats[N_FEATURES] = if cell == serving { 1.0 } else { 0.0 };
        if cell == serving {
            serving_idx = cell_idx;
        }
        meas_edges.push(MeasEdge {
            ue: 0,
            cell: cell_idx,
            feats,
            raw_rsrp: feats_raw[0],
        });
    }
    if serving_idx == usize::MAX {
        return Err(Error::ServingViolation {
            t,
            ue,
            msg: format!("serving cell {serving} has no measurement row"),
        });
    }
    Ok(GraphSnapshot {
        t,
        ues: vec![ue],
        meas_edges,
        serving: vec![serving_idx],
    })
}

/// Top-K candidates for `ue` by current RSRP; deterministic tie-break by
/// ascending CellId; padded slots masked.
pub fn build_candidates(
    snapshot: &GraphSnapshot,
    ue: UeId,
    index: &CellIndex,
) -> Result<CandidateSet> {
    let ue_idx = snapshot
        .ues
        .iter()
        .position(|&u| u == ue)
        .ok_or(Error::NoVisibleCells(ue))?;
    let mut visible: Vec<(usize, f64)> = snapshot
        .meas_edges
        .iter()
        .filter(|e| e.ue == ue_idx)
        .map(|e| (e.cell, e.raw_rsrp))
        .collect();
    if visible.is_empty() {
        return Err(Error::NoVisibleCells(ue));
    }
    visible.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(index.id(a.0).cmp(&index.id(b.0)))
    });
    visible.truncate(CANDIDATE_K);
    let mut mask = [false; CANDIDATE_K];
    for i in 0..visible.len() {
        mask[i] = true;
    }
    Ok(CandidateSet {
        ue,
        cells: visible.iter().map(|&(i, _)| index.id(i)).collect(),
        cell_indices: visible.iter().map(|&(i, _)| i).collect(),
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{fit_normalization, CellSite, Split, Trace, TraceStep};

    fn topo(n: u32) -> Topology {
        Topology {
            cells: (0..n)
                .map(|i| CellSite {
                    id: CellId(i),
                    x_m: 100.0 * i as f64,
                    y_m: 0.0,
                })
                .collect(),
            xn_edges: (0..n.saturating_sub(1))
                .map(|i| (CellId(i), CellId(i + 1)))
                .collect(),
        }
    }

    fn step(t: u64, ue: u32, cell: u32, rsrp: f64, serving: bool) -> TraceStep {
        TraceStep {
            t,
            ue: UeId(ue),
            cell: CellId(cell),
            rsrp,
            rsrq: -10.0,
            sinr: 5.0,
            is_serving: serving,
        }
    }

    fn trace_with_visible(n_cells: u32) -> Trace {
        let mut rows = Vec::new();
        for t in 0..3u64 {
            for c in 0..n_cells {
                rows.push(step(t, 0, c, -80.0 - c as f64, c == 0));
            }
        }
        Trace::new(rows, topo(n_cells), Split::Train).unwrap()
    }

    #[test]
    fn single_ue_single_cell_snapshot() {
        let trace = trace_with_visible(1);
        let stats = fit_normalization(&trace).unwrap();
        let index = CellIndex::new(&trace.topology);
        let snap = build_snapshot(&trace, 0, &stats, &index).unwrap();
        assert_eq!(snap.ues.len(), 1);
        assert_eq!(snap.meas_edges.len(), 1);
        assert_eq!(snap.serving, vec![0]);
    }

    #[test]
    fn twelve_visible_cells_keep_all_edges() {
        let trace = trace_with_visible(12);
        let stats = fit_normalization(&trace).unwrap();
        let index = CellIndex::new(&trace.topology);
        let snap = build_snapshot(&trace, 1, &stats, &index).unwrap();
        // Truncation happens in build_candidates, not here.
        assert_eq!(snap.meas_edges.len(), 12);
        let cand = build_candidates(&snap, UeId(0), &index).unwrap();
        assert_eq!(cand.cells.len(), CANDIDATE_K);
        // Exactly the 8 strongest (cells 0..8 here by construction).
        assert_eq!(
            cand.cells,
            (0..8).map(|i| CellId(i)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn xn_edges_are_deployment_static() {
        let trace = trace_with_visible(4);
        let index = CellIndex::new(&trace.topology);
        assert_eq!(index.xn_pairs(), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn candidates_padded_and_masked() {
        let trace = trace_with_visible(3);
        let stats = fit_normalization(&trace).unwrap();
        let index = CellIndex::new(&trace.topology);
        let snap = build_snapshot(&trace, 0, &stats, &index).unwrap();
        let cand = build_candidates(&snap, UeId(0), &index).unwrap();
        assert_eq!(cand.cells.len(), 3);
        assert_eq!(cand.mask, [true, true, true, false, false, false, false, false]);
    }

    #[test]
    fn equal_rsrp_tie_breaks_on_lower_id() {
        let mut rows = vec![
            step(0, 0, 2, -85.0, false),
            step(0, 0, 1, -85.0, false),
            step(0, 0, 0, -90.0, true),
        ];
        rows.sort_by_key(|s| (s.t, s.ue, s.cell));
        let trace = Trace::new(rows, topo(3), Split::Train).unwrap();
        let stats = fit_normalization(&trace).unwrap();
        let index = CellIndex::new(&trace.topology);
        let snap = build_snapshot(&trace, 0, &stats, &index).unwrap();
        let cand = build_candidates(&snap, UeId(0), &index).unwrap();
        assert_eq!(cand.cells, vec![CellId(1), CellId(2), CellId(0)]);
    }

    #[test]
    fn serving_cell_always_in_candidates_when_visible() {
        let trace = trace_with_visible(6);
        let stats = fit_normalization(&trace).unwrap();
        let index = CellIndex::new(&trace.topology);
        let snap = build_snapshot(&trace, 0, &stats, &index).unwrap();
        let cand = build_candidates(&snap, UeId(0), &index).unwrap();
        assert!(cand.contains(CellId(0)));
    }

    #[test]
    fn relabeling_cells_preserves_candidate_ranks() {
        // Consistent permutation of CellIds in trace and topology.
        let perm = |c: CellId| CellId((c.0 + 2) % 5);
        let mut rows = Vec::new();
        for c in 0..5u32 {
            rows.push(step(0, 0, c, -80.0 - c as f64, c == 0));
        }
        rows.sort_by_key(|s| (s.t, s.ue, s.cell));
        let base = Trace::new(rows.clone(), topo(5), Split::Train).unwrap();

        let mut relabeled_rows: Vec<TraceStep> = rows
            .iter()
            .map(|s| TraceStep {
                cell: perm(s.cell),
                ..*s
            })
            .collect();
        relabeled_rows.sort_by_key(|s| (s.t, s.ue, s.cell));
        let mut topo2 = topo(5);
        for c in topo2.cells.iter_mut() {
            c.id = perm(c.id);
        }
        for e in topo2.xn_edges.iter_mut() {
            *e = (perm(e.0), perm(e.1));
        }
        let relabeled = Trace::new(relabeled_rows, topo2, Split::Train).unwrap();

        let run = |trace: &Trace| {
            let stats = fit_normalization(trace).unwrap();
            let index = CellIndex::new(&trace.topology);
            let snap = build_snapshot(trace, 0, &stats, &index).unwrap();
            build_candidates(&snap, UeId(0), &index).unwrap().cells
        };
        let orig = run(&base);
        let permuted = run(&relabeled);
        assert_eq!(
            permuted,
            orig.iter().map(|&c| perm(c)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn out_of_range_time_errors() {
        let trace = trace_with_visible(2);
        let stats = fit_normalization(&trace).unwrap();
        let index = CellIndex::new(&trace.topology);
        assert!(matches!(
            build_snapshot(&trace, 99, &stats, &index),
            Err(Error::TimeOutOfRange { .. })
        ));
    }
}
