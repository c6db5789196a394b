//! Measurement impairments: correlated shadow fading with a quantize →
//! delay → L3-filter reporting chain, NLOS blockage events, SSB-burst
//! sub-sampling, and the mixed clean/impaired sampler used for robust
//! training.
//!
//! All transforms touch measurements only; serving labels are never
//! modified, so the supervision targets of a perturbed trace are exactly
//! those of its clean reference.

use crate::error::{Error, Result};
use crate::rules::{l3_alpha, l3_filter_step};
use crate::synthgen::STEP_SECONDS;
use crate::trace::{CellId, Trace, UeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Blockage-event parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockageConfig {
    /// Events per trace.
    pub count: usize,
    pub attenuation_db: f64,
    /// Uniform duration range in seconds.
    pub duration_range_s: (f64, f64),
}

impl Default for BlockageConfig {
    fn default() -> BlockageConfig {
        BlockageConfig {
            count: 0,
            attenuation_db: 20.0,
            duration_range_s: (0.5, 2.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PerturbConfig {
    /// Shadow-fading standard deviation in dB.
    pub sigma_s_db: f64,
    /// AR(1) temporal correlation per step.
    pub rho: f64,
    /// Measurement quantization grid in dB.
    pub quant_step_db: f64,
    /// Reporting delay in steps (4 steps = 40 ms).
    pub delay_steps: usize,
    /// L3 filter coefficient index k.
    pub l3_k: u32,
    pub blockage: BlockageConfig,
    /// SSB-burst period; measurements off the burst hold the last value.
    pub ssb_period: usize,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> PerturbConfig {
        PerturbConfig {
            sigma_s_db: 6.0,
            rho: 0.95,
            quant_step_db: 1.0,
            delay_steps: 4,
            l3_k: 4,
            blockage: BlockageConfig::default(),
            ssb_period: 1,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_s_db < 0.0 {
            return Err(Error::InvalidConfig("sigma_s must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig("rho must be in [0, 1)".into()));
        }
        if self.ssb_period == 0 {
            return Err(Error::InvalidConfig("ssb period must be >= 1".into()));
        }
        if self.quant_step_db <= 0.0 {
            return Err(Error::InvalidConfig("quantization step must be positive".into()));
        }
        if self.blockage.duration_range_s.0 > self.blockage.duration_range_s.1
            || self.blockage.duration_range_s.0 < 0.0
        {
            return Err(Error::InvalidConfig("invalid blockage duration range".into()));
        }
        Ok(())
    }
}

/// One stochastic perturbation event, logged for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PerturbEvent {
    ShadowFading {
        ue: UeId,
        cell: CellId,
        sigma_s_db: f64,
        rho: f64,
    },
    Blockage {
        ue: UeId,
        cell: CellId,
        onset_t: u64,
        duration_steps: usize,
        attenuation_db: f64,
    },
    SsbSubsample {
        period: usize,
    },
}

/// JSON sidecar listing every stochastic event applied to a trace.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct PerturbLog {
    pub events: Vec<PerturbEvent>,
}

impl PerturbLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: &Path) -> Result<PerturbLog> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Stationary AR(1) series: s_0 ~ N(0, σ²), s_t = ρ·s_{t−1} + √(1−ρ²)·ε_t
/// with ε_t ~ N(0, σ²), so the marginal std is σ at every step.
pub fn ar1_series(rng: &mut ChaCha8Rng, n: usize, rho: f64, sigma: f64) -> Vec<f64> {
    if n == 0 || sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = Vec::with_capacity(n);
    let innov = (1.0 - rho * rho).sqrt();
    let mut s = normal.sample(rng);
    out.push(s);
    for _ in 1..n {
        s = rho * s + innov * normal.sample(rng);
        out.push(s);
    }
    out
}

/// Round-half-up quantization to a dB grid.
fn quantize(v: f64, step: f64) -> f64 {
    (v / step + 0.5).floor() * step
}

/// Per-link row indices in time order.
fn link_rows(trace: &Trace) -> BTreeMap<(UeId, CellId), Vec<usize>> {
    let mut links: BTreeMap<(UeId, CellId), Vec<usize>> = BTreeMap::new();
    for (i, s) in trace.steps.iter().enumerate() {
        links.entry((s.ue, s.cell)).or_default().push(i);
    }
    links
}

fn rebuild(reference: &Trace, rsrp: Vec<f64>) -> Trace {
    let mut steps = reference.steps.clone();
    for (s, v) in steps.iter_mut().zip(rsrp) {
        s.rsrp = v;
    }
    Trace::new(steps, reference.topology.clone(), reference.split_tag)
        .expect("perturbation preserved trace validity")
}

/// Shadow fading plus the reporting chain: per-link AR(1) noise on RSRP,
/// then quantization, then reporting delay (hold-first for the initial
/// rows), then the L3 IIR filter.
pub fn shadow_fading(trace: &Trace, config: &PerturbConfig) -> Result<(Trace, PerturbLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rsrp: Vec<f64> = trace.steps.iter().map(|s| s.rsrp).collect();
    let mut log = PerturbLog::default();
    let alpha = l3_alpha(config.l3_k);
    for ((ue, cell), rows) in link_rows(trace) {
        let noise = ar1_series(&mut rng, rows.len(), config.rho, config.sigma_s_db);
        if config.sigma_s_db > 0.0 {
            log.events.push(PerturbEvent::ShadowFading {
                ue,
                cell,
                sigma_s_db: config.sigma_s_db,
                rho: config.rho,
            });
        }
        let quantized: Vec<f64> = rows
            .iter()
            .zip(&noise)
            .map(|(&i, &n)| quantize(trace.steps[i].rsrp + n, config.quant_step_db))
            .collect();
        let mut filtered = 0.0;
        for (pos, &i) in rows.iter().enumerate() {
            let delayed = quantized[pos.saturating_sub(config.delay_steps)];
            filtered = if pos == 0 {
                delayed
            } else {
                l3_filter_step(filtered, delayed, alpha)
            };
            rsrp[i] = filtered;
        }
    }
    Ok((rebuild(trace, rsrp), log))
}

/// NLOS blockage: `count` events, each attenuating one random link for a
/// uniformly sampled duration. Events may overlap.
pub fn blockage(trace: &Trace, config: &PerturbConfig) -> Result<(Trace, PerturbLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rsrp: Vec<f64> = trace.steps.iter().map(|s| s.rsrp).collect();
    let mut log = PerturbLog::default();
    let links = link_rows(trace);
    let keys: Vec<&(UeId, CellId)> = links.keys().collect();
    if keys.is_empty() {
        return Ok((rebuild(trace, rsrp), log));
    }
    let (lo, hi) = config.blockage.duration_range_s;
    for _ in 0..config.blockage.count {
        let &(ue, cell) = keys[rng.gen_range(0..keys.len())];
        let rows = &links[&(ue, cell)];
        let onset = rng.gen_range(0..rows.len());
        let duration_s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let duration_steps = ((duration_s / STEP_SECONDS).round() as usize).max(1);
        for &i in rows.iter().skip(onset).take(duration_steps) {
            rsrp[i] -= config.blockage.attenuation_db;
        }
        log.events.push(PerturbEvent::Blockage {
            ue,
            cell,
            onset_t: trace.steps[rows[onset]].t,
            duration_steps,
            attenuation_db: config.blockage.attenuation_db,
        });
    }
    Ok((rebuild(trace, rsrp), log))
}

/// SSB-burst sub-sampling with zero-order hold: off-burst steps repeat the
/// last on-burst measurement. Returns a per-row staleness mask alongside
/// the trace.
pub fn ssb_subsample(trace: &Trace, config: &PerturbConfig) -> Result<(Trace, Vec<bool>, PerturbLog)> {
    config.validate()?;
    let p = config.ssb_period as u64;
    let mut rsrp: Vec<f64> = trace.steps.iter().map(|s| s.rsrp).collect();
    let mut stale = vec![false; trace.steps.len()];
    let mut log = PerturbLog::default();
    if p > 1 {
        log.events.push(PerturbEvent::SsbSubsample {
            period: config.ssb_period,
        });
        for (_, rows) in link_rows(trace) {
            let mut held = None;
            for &i in &rows {
                let t = trace.steps[i].t;
                if t % p == 0 || held.is_none() {
                    held = Some(rsrp[i]);
                } else {
                    rsrp[i] = held.unwrap();
                    stale[i] = true;
                }
            }
        }
    }
    Ok((rebuild(trace, rsrp), stale, log))
}

/// What one training draw should see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SampleKind {
    Clean,
    Impaired {
        sigma_s_db: u32,
        blockage: bool,
        ssb: bool,
    },
}

/// One draw: the impairment choice plus the seed that realizes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawSpec {
    pub kind: SampleKind,
    pub seed: u64,
}

/// Mixture policy for robust training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MixedConfig {
    /// Probability of drawing the clean reference.
    pub clean_weight: f64,
    /// Integer σ_s values sampled uniformly for impaired draws.
    pub sigma_set: Vec<u32>,
    /// Per-draw probability of adding blockage / SSB sub-sampling.
    pub blockage_prob: f64,
    pub ssb_prob: f64,
    pub blockage_count: usize,
    pub ssb_period: usize,
}

impl Default for MixedConfig {
    fn default() -> MixedConfig {
        MixedConfig {
            clean_weight: 0.5,
            sigma_set: (6..=12).collect(),
            blockage_prob: 0.5,
            ssb_prob: 0.5,
            blockage_count: 4,
            ssb_period: 4,
        }
    }
}

/// Draws clean/impaired selections for training sequences. Labels always
/// come from the clean reference regardless of the draw.
pub struct MixedSampler {
    config: MixedConfig,
    rng: ChaCha8Rng,
}

impl MixedSampler {
    pub fn new(config: MixedConfig, seed: u64) -> Result<MixedSampler> {
        if config.sigma_set.is_empty() {
            return Err(Error::InvalidConfig("empty sigma set".into()));
        }
        if !(0.0..=1.0).contains(&config.clean_weight) {
            return Err(Error::InvalidConfig("clean weight must be in [0, 1]".into()));
        }
        Ok(MixedSampler {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> DrawSpec {
        let seed = self.rng.gen();
        let kind = if self.rng.gen::<f64>() < self.config.clean_weight {
            SampleKind::Clean
        } else {
            let s = self.config.sigma_set[self.rng.gen_range(0..self.config.sigma_set.len())];
            SampleKind::Impaired {
                sigma_s_db: s,
                blockage: self.rng.gen::<f64>() < self.config.blockage_prob,
                ssb: self.rng.gen::<f64>() < self.config.ssb_prob,
            }
        };
        DrawSpec { kind, seed }
    }
}

/// Realizes a draw on (a view of) the clean trace: measurements perturbed,
/// serving labels untouched.
pub fn apply_draw(clean: &Trace, spec: &DrawSpec, mixed: &MixedConfig) -> Result<(Trace, PerturbLog)> {
    match spec.kind {
        SampleKind::Clean => Ok((clean.clone(), PerturbLog::default())),
        SampleKind::Impaired {
            sigma_s_db,
            blockage: with_blockage,
            ssb,
        } => {
            let mut log = PerturbLog::default();
            let mut config = PerturbConfig {
                sigma_s_db: sigma_s_db as f64,
                seed: spec.seed,
                ..PerturbConfig::default()
            };
            let (mut out, l) = shadow_fading(clean, &config)?;
            log.events.extend(l.events);
            if with_blockage {
                config.blockage.count = mixed.blockage_count;
                config.seed = spec.seed.wrapping_add(1);
                let (t, l) = blockage(&out, &config)?;
                out = t;
                log.events.extend(l.events);
            }
            if ssb {
                config.ssb_period = mixed.ssb_period;
                let (t, _, l) = ssb_subsample(&out, &config)?;
                out = t;
                log.events.extend(l.events);
            }
            Ok((out, log))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, ScenarioConfig};
    use crate::trace::{CellSite, Split, Topology, TraceStep};

    fn small_trace() -> Trace {
        let config = ScenarioConfig {
            n_cells: 4,
            n_ues: 2,
            duration_steps: 400,
            seed: 11,
            ..ScenarioConfig::default()
        };
        generate(&config).unwrap()
    }

    fn reporting_chain(values: &[f64], cfg: &PerturbConfig) -> Vec<f64> {
        let alpha = l3_alpha(cfg.l3_k);
        let quantized: Vec<f64> = values.iter().map(|&v| quantize(v, cfg.quant_step_db)).collect();
        let mut out = Vec::with_capacity(values.len());
        let mut f = 0.0;
        for i in 0..values.len() {
            let delayed = quantized[i.saturating_sub(cfg.delay_steps)];
            f = if i == 0 { delayed } else { l3_filter_step(f, delayed, alpha) };
            out.push(f);
        }
        out
    }

    #[test]
    fn zero_sigma_reduces_to_the_reporting_chain() {
        let trace = small_trace();
        let cfg = PerturbConfig {
            sigma_s_db: 0.0,
            ..PerturbConfig::default()
        };
        let (out, log) = shadow_fading(&trace, &cfg).unwrap();
        assert!(log.events.is_empty());
        for ((ue, cell), rows) in link_rows(&trace) {
            let _ = (ue, cell);
            let clean: Vec<f64> = rows.iter().map(|&i| trace.steps[i].rsrp).collect();
            let expect = reporting_chain(&clean, &cfg);
            for (&i, e) in rows.iter().zip(&expect) {
                assert!((out.steps[i].rsrp - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ar1_marginal_std_matches_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = 8.0;
        let s = ar1_series(&mut rng, 100_000, 0.95, sigma);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - sigma).abs() / sigma < 0.05,
            "marginal std {std} vs sigma {sigma}"
        );
    }

    #[test]
    fn shadow_fading_is_deterministic_per_seed() {
        let trace = small_trace();
        let cfg = PerturbConfig {
            sigma_s_db: 8.0,
            seed: 42,
            ..PerturbConfig::default()
        };
        let (a, _) = shadow_fading(&trace, &cfg).unwrap();
        let (b, _) = shadow_fading(&trace, &cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = shadow_fading(&trace, &PerturbConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_blockage_is_identity() {
        let trace = small_trace();
        let (out, log) = blockage(&trace, &PerturbConfig::default()).unwrap();
        assert_eq!(out, trace);
        assert!(log.events.is_empty());
    }

    #[test]
    fn single_blockage_carves_one_contiguous_interval() {
        let trace = small_trace();
        let cfg = PerturbConfig {
            blockage: BlockageConfig {
                count: 1,
                ..BlockageConfig::default()
            },
            seed: 3,
            ..PerturbConfig::default()
        };
        let (out, log) = blockage(&trace, &cfg).unwrap();
        assert_eq!(log.events.len(), 1);
        let mut touched: Vec<usize> = Vec::new();
        for (i, (a, b)) in trace.steps.iter().zip(&out.steps).enumerate() {
            if a.rsrp != b.rsrp {
                assert!((a.rsrp - b.rsrp - 20.0).abs() < 1e-12);
                touched.push(i);
            }
        }
        assert!(!touched.is_empty());
        // All touched rows belong to one link and are consecutive there.
        let (ue, cell) = (trace.steps[touched[0]].ue, trace.steps[touched[0]].cell);
        assert!(touched.iter().all(|&i| trace.steps[i].ue == ue && trace.steps[i].cell == cell));
        let rows = &link_rows(&trace)[&(ue, cell)];
        let first = rows.iter().position(|i| *i == touched[0]).unwrap();
        assert_eq!(&rows[first..first + touched.len()], touched.as_slice());
    }

    #[test]
    fn thirty_two_blockages_are_logged() {
        let trace = small_trace();
        let cfg = PerturbConfig {
            blockage: BlockageConfig {
                count: 32,
                ..BlockageConfig::default()
            },
            seed: 9,
            ..PerturbConfig::default()
        };
        let (_, log) = blockage(&trace, &cfg).unwrap();
        assert_eq!(log.events.len(), 32);
        assert!(log
            .events
            .iter()
            .all(|e| matches!(e, PerturbEvent::Blockage { .. })));
    }

    #[test]
    fn unit_ssb_period_is_identity() {
        let trace = small_trace();
        let (out, stale, log) = ssb_subsample(&trace, &PerturbConfig::default()).unwrap();
        assert_eq!(out, trace);
        assert!(stale.iter().all(|&s| !s));
        assert!(log.events.is_empty());
    }

    #[test]
    fn ssb_on_a_ramp_produces_a_staircase() {
        let topology = Topology {
            cells: vec![CellSite {
                id: CellId(0),
                x_m: 0.0,
                y_m: 0.0,
            }],
            xn_edges: vec![],
        };
        let rows: Vec<TraceStep> = (0..16u64)
            .map(|t| TraceStep {
                t,
                ue: UeId(0),
                cell: CellId(0),
                rsrp: -90.0 + t as f64, // linear ramp
                rsrq: -10.0,
                sinr: 5.0,
                is_serving: true,
            })
            .collect();
        let trace = Trace::new(rows, topology, Split::Train).unwrap();
        let cfg = PerturbConfig {
            ssb_period: 4,
            ..PerturbConfig::default()
        };
        let (out, stale, _) = ssb_subsample(&trace, &cfg).unwrap();
        for (i, s) in out.steps.iter().enumerate() {
            let tread = (i / 4) * 4;
            assert!((s.rsrp - (-90.0 + tread as f64)).abs() < 1e-12);
            assert_eq!(stale[i], i % 4 != 0);
        }
        let n_stale = stale.iter().filter(|&&s| s).count();
        assert_eq!(n_stale, 12); // (1 − 1/4) of 16
    }

    #[test]
    fn mixed_sampler_draws_half_clean_and_covers_the_sigma_set() {
        let mut sampler = MixedSampler::new(MixedConfig::default(), 7).unwrap();
        let mut clean = 0usize;
        let mut sigma_counts: BTreeMap<u32, usize> = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            match sampler.draw().kind {
                SampleKind::Clean => clean += 1,
                SampleKind::Impaired { sigma_s_db, .. } => {
                    *sigma_counts.entry(sigma_s_db).or_default() += 1;
                }
            }
        }
        let frac = clean as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "clean fraction {frac}");
        assert_eq!(sigma_counts.keys().copied().collect::<Vec<_>>(), (6..=12).collect::<Vec<_>>());
        let impaired = (n - clean) as f64;
        for (&s, &c) in &sigma_counts {
            let f = c as f64 / impaired;
            assert!((f - 1.0 / 7.0).abs() < 0.05, "sigma {s} frequency {f}");
        }
    }

    #[test]
    fn impaired_draws_keep_clean_labels() {
        let trace = small_trace();
        let mixed = MixedConfig::default();
        let mut sampler = MixedSampler::new(mixed.clone(), 21).unwrap();
        let mut seen_impaired = false;
        for _ in 0..8 {
            let spec = sampler.draw();
            let (out, _) = apply_draw(&trace, &spec, &mixed).unwrap();
            // Serving labels are byte-identical to the clean reference.
            for (a, b) in trace.steps.iter().zip(&out.steps) {
                assert_eq!(a.is_serving, b.is_serving);
                assert_eq!((a.t, a.ue, a.cell), (b.t, b.ue, b.cell));
            }
            if !matches!(spec.kind, SampleKind::Clean) {
                seen_impaired = true;
            }
        }
        assert!(seen_impaired);
    }

    #[test]
    fn perturbations_preserve_the_serving_sequence() {
        let trace = small_trace();
        let cfg = PerturbConfig {
            sigma_s_db: 10.0,
            blockage: BlockageConfig {
                count: 8,
                ..BlockageConfig::default()
            },
            ssb_period: 8,
            seed: 31,
            ..PerturbConfig::default()
        };
        let (a, _) = shadow_fading(&trace, &cfg).unwrap();
        let (b, _) = blockage(&a, &cfg).unwrap();
        let (c, _, _) = ssb_subsample(&b, &cfg).unwrap();
        for ue in trace.ue_ids() {
            assert_eq!(trace.serving_sequence(ue), c.serving_sequence(ue));
        }
    }

    #[test]
    fn log_round_trips_through_json() {
        let log = PerturbLog {
            events: vec![
                PerturbEvent::Blockage {
                    ue: UeId(1),
                    cell: CellId(2),
                    onset_t: 100,
                    duration_steps: 50,
                    attenuation_db: 20.0,
                },
                PerturbEvent::SsbSubsample { period: 4 },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.json");
        log.save(&path).unwrap();
        assert_eq!(PerturbLog::load(&path).unwrap(), log);
    }
}
