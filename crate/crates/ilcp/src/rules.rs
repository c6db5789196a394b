//! Event-triggered A3/A5 handover rule with hysteresis, time-to-trigger and
//! the L3 IIR measurement filter.
//!
//! Serves two purposes: the rule-based evaluation baseline, and the label
//! generator for synthetic scenarios (noise-free input).

use crate::error::{Error, Result};
use crate::trace::{CellId, HandoverEvent, Trace, UeId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A3/A5 rule parameters. A5 thresholds are disabled when `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    /// Hysteresis margin H in dB.
    pub hysteresis_db: f64,
    /// Time-to-trigger in steps (1 step = 10 ms).
    pub ttt_steps: u32,
    /// L3 IIR filter coefficient k; smoothing factor a = (1/2)^(k/4).
    pub l3_k: u32,
    /// Ping-pong window in steps.
    pub ping_pong_window: u64,
    /// A5: serving must be below this (dBm) for the rule to fire.
    pub a5_serving_below_dbm: Option<f64>,
    /// A5: neighbor must be above this (dBm) for the rule to fire.
    pub a5_neighbor_above_dbm: Option<f64>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            hysteresis_db: 3.0,
            ttt_steps: 16,
            l3_k: 4,
            ping_pong_window: 50,
            a5_serving_below_dbm: None,
            a5_neighbor_above_dbm: None,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hysteresis_db < 0.0 {
            return Err(Error::InvalidConfig("hysteresis must be >= 0".into()));
        }
        if self.ttt_steps < 1 {
            return Err(Error::InvalidConfig("ttt must be >= 1".into()));
        }
        Ok(())
    }

    /// L3 smoothing factor a = (1/2)^(k/4); k = 0 means no filtering.
    pub fn l3_alpha(&self) -> f64 {
        l3_alpha(self.l3_k)
    }
}

/// L3 smoothing factor for coefficient index k: a = (1/2)^(k/4).
pub fn l3_alpha(k: u32) -> f64 {
    0.5f64.powf(k as f64 / 4.0)
}

/// One L3 filter update: F = (1-a) F_prev + a M.
pub fn l3_filter_step(f_prev: f64, measurement: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * f_prev + alpha * measurement
}

/// Per-UE rule state machine.
#[derive(Debug, Clone, Default)]
pub struct RuleState {
    filtered: BTreeMap<CellId, f64>,
    counters: BTreeMap<CellId, u32>,
    pub serving: Option<CellId>,
}

impl RuleState {
    pub fn new() -> RuleState {
        RuleState::default()
    }

    pub fn filtered_rsrp(&self, cell: CellId) -> Option<f64> {
        self.filtered.get(&cell).copied()
    }
}

/// Advances the rule by one step for one UE given its visible (cell, rsrp)
/// measurements at time `t`, returning a handover event if the rule fires.
///
/// On first sight of the UE the serving cell initializes to the strongest
/// raw measurement without emitting an event.
pub fn rule_step(
    state: &mut RuleState,
    config: &RuleConfig,
    ue: UeId,
    t: u64,
    measurements: &[(CellId, f64)],
) -> Option<HandoverEvent> {
    let alpha = config.l3_alpha();
    for &(cell, rsrp) in measurements {
        let f = match state.filtered.get(&cell) {
            Some(&prev) => l3_filter_step(prev, rsrp, alpha),
            None => rsrp, // first sample initializes the filter
        };
        state.filtered.insert(cell, f);
    }

    let serving = match state.serving {
        Some(s) => s,
        None => {
            // Initial attach: strongest raw RSRP, lower id on ties.
            let best = measurements
                .iter()
                .copied()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))?;
            state.serving = Some(best.0);
            return None;
        }
    };
    let f_serving = state.filtered_rsrp(serving)?;

    let mut fired: Option<(CellId, f64)> = None;
    for &(cell, _) in measurements {
        if cell == serving {
            continue;
        }
        let f_n = state.filtered[&cell];
        let mut cond = f_n > f_serving + config.hysteresis_db;
        if let Some(t1) = config.a5_serving_below_dbm {
            cond = cond && f_serving < t1;
        }
        if let Some(t2) = config.a5_neighbor_above_dbm {
            cond = cond && f_n > t2;
        }
        let counter = state.counters.entry(cell).or_insert(0);
        if cond {
            *counter = (*counter + 1).min(config.ttt_steps);
            if *counter >= config.ttt_steps {
                // Strongest qualifying neighbor wins; lower CellId on ties.
                let better = match fired {
                    None => true,
                    Some((fc, ff)) => f_n > ff || (f_n == ff && cell < fc),
                };
                if better {
                    fired = Some((cell, f_n));
                }
            }
        } else {
            *counter = 0;
        }
    }

    if let Some((target, _)) = fired {
        state.serving = Some(target);
        state.counters.clear();
        return Some(HandoverEvent {
            t_star: t,
            ue,
            source: serving,
            target,
        });
    }
    None
}

/// Closed-loop rule decisions over a whole measurement trace. The trace's
/// own serving flags are ignored; only measurements drive the rule.
///
/// Returns the per-UE serving sequences and the fired handover events.
pub fn run_rule(
    trace: &Trace,
    config: &RuleConfig,
) -> (BTreeMap<UeId, Vec<(u64, CellId)>>, Vec<HandoverEvent>) {
    let mut states: BTreeMap<UeId, RuleState> = BTreeMap::new();
    let mut sequences: BTreeMap<UeId, Vec<(u64, CellId)>> = BTreeMap::new();
    let mut events = Vec::new();

    // Steps are sorted by (t, ue, cell); walk (t, ue) groups in order.
    let mut i = 0;
    while i < trace.steps.len() {
        let (t, ue) = (trace.steps[i].t, trace.steps[i].ue);
        let mut meas = Vec::new();
        while i < trace.steps.len() && trace.steps[i].t == t && trace.steps[i].ue == ue {
            meas.push((trace.steps[i].cell, trace.steps[i].rsrp));
            i += 1;
        }
        let state = states.entry(ue).or_default();
        if let Some(ev) = rule_step(state, config, ue, t, &meas) {
            events.push(ev);
        }
        if let Some(s) = state.serving {
            sequences.entry(ue).or_default().push((t, s));
        }
    }
    (sequences, events)
}
