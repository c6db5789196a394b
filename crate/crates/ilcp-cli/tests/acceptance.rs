//! Release acceptance suite: one test per criterion, each printing a single
//! `criterion N (...): PASS` line when its assertions hold.
//!
//! Every tolerance, grid, seed and time budget is pinned as a constant at
//! the top of this file. Criteria 4–6 share lazily trained checkpoints on
//! two fixed synthetic scenarios:
//!
//! * a dense-handover 3×3 grid (120 m spacing, 0.5 dB hysteresis, 4-step
//!   TTT, slow k = 20 L3 label filter) whose measurements go through the
//!   σ = 0 reporting chain (1 dB quantization, 4-step delay, k = 4 L3
//!   filter), used for the cold-start gap and the robustness ratios; here
//!   the label dynamics depend on more history than a freshly reset state
//!   can see, which is what makes state transfer measurable at desk scale;
//! * a mild 3×3 grid (200 m spacing, default rule) for the closed-loop
//!   ping-pong ordering.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ilcp::diffcore::{check_gradients, Tape};
use ilcp::eval::{
    acc_at_delta, acc_curve, bootstrap_ci, bootstrap_means, closed_loop_events,
    latency_benchmark, ping_pong_rate, rule_hof, EvalConfig, EvalMode,
};
use ilcp::graph::{build_candidates, build_snapshot_for_ue, CellIndex};
use ilcp::model::{
    candidate_embeddings, candidate_probs, prediction_loss, vae_loss, ModelConfig, ModelParams,
    TapeModel,
};
use ilcp::perturb::PerturbConfig;
use ilcp::rules::{l3_alpha, l3_filter_step, run_rule, RuleConfig};
use ilcp::synthgen::{generate, ScenarioConfig};
use ilcp::trace::{
    extract_handover_events, fit_normalization, split_by_trajectory, CellId, CellSite,
    HandoverEvent, Split, Topology, Trace, TraceStep, UeId,
};
use ilcp::trainer::{fit, TrainConfig, TrainMode};
use ilcp::xn::{
    deserialize_latent, serialize_latent, transfer, TransportMode, XnHandoverRequest,
    LATENT_DIM, PAYLOAD_BYTES,
};

// ---------------------------------------------------------------------------
// Pinned tolerances, grids, seeds and budgets.
// ---------------------------------------------------------------------------

/// Criterion 1: central-difference step, relative-error bound, seed count
/// and wall-clock budget.
const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 5;
const FD_BUDGET_SECS: f64 = 120.0;

/// Criterion 2: number of codec round trips.
const CODEC_TRIALS: usize = 10_000;

/// Criteria 4/8: bootstrap protocol.
const BOOTSTRAP_B: usize = 1000;
const CI_LEVEL: f64 = 95.0;

/// Criterion 4: post-handover offsets δ ∈ [5, 25], prediction horizon Δ,
/// rollback depth, minimum test-event count, wall-clock budget.
const GAP_DELTAS: [u64; 5] = [5, 10, 15, 20, 25];
const BIG_DELTA: u64 = 60;
const STATE_HORIZON: usize = 128;
const MIN_TEST_EVENTS: usize = 200;
const GAP_BUDGET_SECS: f64 = 1800.0;

/// Criterion 5: impairment level, ratio bounds and sweep grids.
const ROBUST_SIGMA: f64 = 12.0;
const RULE_HOF_MIN_FACTOR: f64 = 5.0;
const ILCP_HOF_MAX_FACTOR: f64 = 1.5;
const SIGMA_GRID: [f64; 5] = [0.0, 3.0, 6.0, 9.0, 12.0];
const BLOCKAGE_GRID: [usize; 5] = [0, 4, 8, 16, 32];
const SSB_GRID: [usize; 5] = [1, 2, 4, 8, 16];

/// Criterion 6: ping-pong window in steps.
const PING_PONG_WINDOW: u64 = 50;

/// Criterion 7: latency protocol.
const LATENCY_RUNS: usize = 1000;
const P99_BUDGET_MS: f64 = 10.0;

/// Criterion 8: tolerance (percentage points of resample mass) for the
/// 2-event enumeration check, and the pinned resample seed.
const ENUM_TOL: f64 = 0.01;
const ENUM_SEED: u64 = 10;

/// Shared seeds: scenario generation (train/test), the measurement chains,
/// training, and the bootstrap draws.
const TRAIN_SCENARIO_SEED: u64 = 42;
const TEST_SCENARIO_SEED: u64 = 43;
const TRAIN_CHAIN_SEED: u64 = 7;
const TEST_CHAIN_SEED: u64 = 9;
const TRAIN_SEED: u64 = 1;
const GAP_BOOTSTRAP_SEED: u64 = 7;

// ---------------------------------------------------------------------------
// Shared scenarios and checkpoints.
// ---------------------------------------------------------------------------

fn dense_rule() -> RuleConfig {
    RuleConfig {
        hysteresis_db: 0.5,
        ttt_steps: 4,
        l3_k: 20,
        ..RuleConfig::default()
    }
}

fn dense_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_cells: 9,
        spacing_m: 120.0,
        n_ues: 24,
        duration_steps: 6000,
        speed_min_mps: 25.0,
        speed_max_mps: 35.0,
        label_rule: dense_rule(),
        seed,
        ..ScenarioConfig::default()
    }
}

fn mild_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_cells: 9,
        spacing_m: 200.0,
        n_ues: 24,
        duration_steps: 6000,
        speed_min_mps: 25.0,
        speed_max_mps: 35.0,
        seed,
        ..ScenarioConfig::default()
    }
}

/// The σ-parameterized reporting chain (AR(1) shadow fading, 1 dB
/// quantization, 4-step delay, k = 4 L3 filter). σ = 0 keeps only the
/// chain's systematic part. Serving labels are untouched.
fn reporting_chain(trace: &Trace, sigma: f64, seed: u64) -> Trace {
    let cfg = PerturbConfig {
        sigma_s_db: sigma,
        seed,
        ..PerturbConfig::default()
    };
    ilcp::perturb::shadow_fading(trace, &cfg).unwrap().0
}

fn dense_train_config(mode: TrainMode, robust: bool) -> TrainConfig {
    TrainConfig {
        max_epochs: 12,
        windows_per_epoch: 64,
        batch_sequences: 16,
        window_steps: 64,
        warmup_steps: 16,
        val_state_horizon: 16,
        delta: BIG_DELTA,
        mode,
        robust,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    }
}

fn mild_train_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        max_epochs: 15,
        windows_per_epoch: 64,
        batch_sequences: 32,
        warmup_steps: 8,
        val_state_horizon: 16,
        mode,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    }
}

fn train_on(train_meas: &Trace, cfg: &TrainConfig, out: &Path) -> (ModelParams, f64) {
    let (tr, val, _) = split_by_trajectory(train_meas, (0.7, 0.15, 0.15), TRAIN_SEED).unwrap();
    let stats = fit_normalization(&tr).unwrap();
    let index = CellIndex::new(&train_meas.topology);
    let started = Instant::now();
    let outcome = fit(
        ModelConfig::standard(index.len()),
        &tr,
        &val,
        &stats,
        &index,
        cfg,
        out,
    )
    .unwrap();
    (outcome.params, started.elapsed().as_secs_f64())
}

struct World {
    dense_test: Trace,
    dense_test_meas: Trace,
    dense_events: Vec<HandoverEvent>,
    ilcp: ModelParams,
    zk: ModelParams,
    robust: ModelParams,
    /// Wall-clock training time for the ilcp + zero-knowledge pair, part of
    /// criterion 4's budget.
    gap_training_secs: f64,
    mild_test: Trace,
    mild_ilcp: ModelParams,
    mild_zk: ModelParams,
    _ckpt_dir: tempfile::TempDir,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let ckpt_dir = tempfile::tempdir().unwrap();
        let at = |name: &str| ckpt_dir.path().join(name);

        let dense_train = generate(&dense_scenario(TRAIN_SCENARIO_SEED)).unwrap();
        let dense_train_meas = reporting_chain(&dense_train, 0.0, TRAIN_CHAIN_SEED);
        drop(dense_train);
        let dense_test = generate(&dense_scenario(TEST_SCENARIO_SEED)).unwrap();
        let dense_test_meas = reporting_chain(&dense_test, 0.0, TEST_CHAIN_SEED);
        let dense_events = extract_handover_events(&dense_test);

        let (ilcp, ilcp_secs) = train_on(
            &dense_train_meas,
            &dense_train_config(TrainMode::Ilcp, false),
            &at("dense-ilcp"),
        );
        let (zk, zk_secs) = train_on(
            &dense_train_meas,
            &dense_train_config(TrainMode::ZeroKnowledge, false),
            &at("dense-zk"),
        );
        let (robust, _) = train_on(
            &dense_train_meas,
            &dense_train_config(TrainMode::Ilcp, true),
            &at("dense-robust"),
        );
        drop(dense_train_meas);

        let mild_train = generate(&mild_scenario(TRAIN_SCENARIO_SEED)).unwrap();
        let mild_test = generate(&mild_scenario(TEST_SCENARIO_SEED)).unwrap();
        let (mild_ilcp, _) = train_on(
            &mild_train,
            &mild_train_config(TrainMode::Ilcp),
            &at("mild-ilcp"),
        );
        let (mild_zk, _) = train_on(
            &mild_train,
            &mild_train_config(TrainMode::ZeroKnowledge),
            &at("mild-zk"),
        );

        World {
            dense_test,
            dense_test_meas,
            dense_events,
            ilcp,
            zk,
            robust,
            gap_training_secs: ilcp_secs + zk_secs,
            mild_test,
            mild_ilcp,
            mild_zk,
            _ckpt_dir: ckpt_dir,
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient check over the full loss path.
// ---------------------------------------------------------------------------

/// One representative block per architectural component; every seed checks
/// the whole list.
const FD_BLOCKS: [&str; 12] = [
    "embed.cell",
    "enc.l0.q.ue",
    "enc.l0.att.meas",
    "enc.l1.edge",
    "gru.w_n",
    "gru.u_z",
    "scorer.w1",
    "vae.enc.mu.w",
    "vae.enc.lv.w",
    "vae.dec.w",
    "proj.w1",
    "gate.w1",
];

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let scenario = ScenarioConfig {
        n_cells: 4,
        spacing_m: 150.0,
        n_ues: 3,
        duration_steps: 1500,
        speed_min_mps: 25.0,
        speed_max_mps: 35.0,
        seed: 11,
        ..ScenarioConfig::default()
    };
    let trace = generate(&scenario).unwrap();
    let stats = fit_normalization(&trace).unwrap();
    let index = CellIndex::new(&trace.topology);
    let events = extract_handover_events(&trace);
    let event = events.first().expect("gradcheck scenario has no handovers");
    let serving: Vec<(u64, CellId)> = trace.serving_sequence(event.ue);
    let serving_at = |t: u64| -> CellId {
        let i = serving.partition_point(|&(st, _)| st <= t);
        serving[i.saturating_sub(1)].1
    };

    let mut worst: f64 = 0.0;
    for seed in 0..FD_SEEDS {
        let params = ModelParams::init(ModelConfig::toy(4), seed).unwrap();
        let mut eps_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let eps: Vec<f64> = (0..params.config.d_z)
            .map(|_| eps_rng.gen_range(-1.0..1.0))
            .collect();
        for block in FD_BLOCKS {
            let (shape, flat) = params.blocks.get(block).unwrap().clone();
            let (rows, cols) = (shape[0], shape[1]);
            // Forward pass over a 4-step window straddling the handover:
            // two recurrent steps, the compress → decode → project handover
            // step (fixed ε, dropout off), one recurrent step after; loss is
            // the mean prediction NLL plus the variational term, exactly the
            // training objective.
            let f = |tape: &Tape, vals: &[f64]| {
                let leaf = tape.leaf(rows, cols, vals);
                let mut model = TapeModel::new(tape, &params);
                model.override_block(block, leaf);
                let mut h = model.h_init();
                let mut pred_events = Vec::new();
                let mut vae_term = None;
                for t in event.t_star - 2..=event.t_star + 1 {
                    let snap = build_snapshot_for_ue(&trace, t, event.ue, &stats, &index).unwrap();
                    let enc = model.encode_snapshot(&snap, &index);
                    let x = enc.ue[0];
                    let cand = build_candidates(&snap, event.ue, &index).unwrap();
                    let emb = candidate_embeddings(tape, &enc, &cand);
                    if t == event.t_star {
                        let eps_leaf = tape.leaf(1, params.config.d_z, &eps);
                        let compressed = model.vae_compress(h, Some(eps_leaf));
                        let h_tilde = model.vae_decode(compressed.z);
                        vae_term = Some(vae_loss(
                            tape,
                            h,
                            h_tilde,
                            compressed.mu,
                            compressed.logvar,
                            params.config.beta,
                        ));
                        let mut rng = ChaCha8Rng::seed_from_u64(0);
                        h = model.project(h_tilde, x, false, &mut rng);
                    } else {
                        h = model.gru_step(h, x);
                    }
                    if let Some(slot) = cand.slot_of(serving_at(t + 5)) {
                        let scores = model.score_candidates(h, emb, &cand.mask);
                        pred_events.push((candidate_probs(tape, scores, &cand.mask), slot));
                    }
                }
                let pred = prediction_loss(tape, &pred_events);
                let loss = tape.scale(pred.total, 1.0 / pred.n_events as f64);
                tape.add(loss, vae_term.unwrap())
            };
            let report = check_gradients(&flat, f, FD_STEP);
            assert!(
                report.passes(FD_TOL),
                "seed {seed}, block {block}: max rel err {:.3e} >= {FD_TOL:.0e}",
                report.max_rel_error
            );
            worst = worst.max(report.max_rel_error);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < FD_BUDGET_SECS,
        "gradient check took {elapsed:.0} s >= {FD_BUDGET_SECS} s"
    );
    println!(
        "criterion 1 (gradient correctness): PASS — {} seeds x {} blocks, max rel err {:.2e}, {:.1} s",
        FD_SEEDS,
        FD_BLOCKS.len(),
        worst,
        elapsed
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: codec exactness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_codec_exactness() {
    assert_eq!(PAYLOAD_BYTES, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..CODEC_TRIALS {
        let mut z = [0f32; LATENT_DIM];
        for v in &mut z {
            *v = rng.gen_range(-1e4f32..1e4f32);
        }
        let payload = serialize_latent(&z).unwrap();
        assert_eq!(payload.len(), 128);
        let back = deserialize_latent(&payload).unwrap();
        for (a, b) in z.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits(), "codec round trip not bit-exact");
        }
        // The transport envelope preserves the payload bit-exactly too.
        let request = XnHandoverRequest {
            ue: UeId(1),
            source: CellId(0),
            target: CellId(2),
            t_star: 77,
            latent: Some(z),
        };
        let delivered = transfer(&request, 10.0, TransportMode::InProcess)
            .unwrap()
            .delivered;
        let received = delivered.latent.unwrap();
        for (a, b) in z.iter().zip(&received) {
            assert_eq!(a.to_bits(), b.to_bits(), "envelope round trip not bit-exact");
        }
    }

    // Prediction with the codec bypassed is bit-identical to prediction
    // with the codec, on a real snapshot.
    let scenario = ScenarioConfig {
        n_cells: 4,
        spacing_m: 150.0,
        n_ues: 2,
        duration_steps: 400,
        seed: 3,
        ..ScenarioConfig::default()
    };
    let trace = generate(&scenario).unwrap();
    let stats = fit_normalization(&trace).unwrap();
    let index = CellIndex::new(&trace.topology);
    let params = ModelParams::init(ModelConfig::toy(index.len()), 5).unwrap();
    let ue = trace.ue_ids()[0];
    let tape = Tape::new();
    let model = TapeModel::new(&tape, &params);
    let snap = build_snapshot_for_ue(&trace, 100, ue, &stats, &index).unwrap();
    let enc = model.encode_snapshot(&snap, &index);
    let cand = build_candidates(&snap, ue, &index).unwrap();
    let emb = candidate_embeddings(&tape, &enc, &cand);
    let hv: Vec<f64> = (0..params.config.d_h).map(|i| (i as f64 * 0.37).sin()).collect();
    let h = tape.leaf(1, params.config.d_h, &hv);
    let with_codec = model
        .ilcp_handover_inference(h, enc.ue[0], emb, &cand.mask, true)
        .unwrap();
    let bypassed = model
        .ilcp_handover_inference(h, enc.ue[0], emb, &cand.mask, false)
        .unwrap();
    assert_eq!(with_codec.predicted_slot, bypassed.predicted_slot);
    for (a, b) in with_codec.scores.iter().zip(&bypassed.scores) {
        assert_eq!(a.to_bits(), b.to_bits(), "codec bypass changed the scores");
    }
    for (a, b) in with_codec.payload.iter().zip(&bypassed.payload) {
        assert_eq!(a.to_bits(), b.to_bits(), "codec bypass changed the payload");
    }
    println!(
        "criterion 2 (codec exactness): PASS — {CODEC_TRIALS} bit-exact round trips, 128-byte payloads, bypass bit-identical"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: rule-engine oracle.
// ---------------------------------------------------------------------------

/// Serving cell steady at −90 dBm, neighbor ramping 1 dB per step from
/// −100 dBm: with H = 3, TTT = 4, k = 0 the entry condition first holds at
/// t = 14 (−86 > −87) and the trigger fires at t = 17.
fn ramp_trace(steps: u64) -> Trace {
    let mut rows = Vec::new();
    for t in 0..steps {
        rows.push(TraceStep {
            t,
            ue: UeId(0),
            cell: CellId(0),
            rsrp: -90.0,
            rsrq: -10.0,
            sinr: 5.0,
            is_serving: true,
        });
        rows.push(TraceStep {
            t,
            ue: UeId(0),
            cell: CellId(1),
            rsrp: -100.0 + t as f64,
            rsrq: -10.0,
            sinr: 5.0,
            is_serving: false,
        });
    }
    let topology = Topology {
        cells: vec![
            CellSite { id: CellId(0), x_m: 0.0, y_m: 0.0 },
            CellSite { id: CellId(1), x_m: 100.0, y_m: 0.0 },
        ],
        xn_edges: vec![(CellId(0), CellId(1))],
    };
    Trace::new(rows, topology, Split::Train).unwrap()
}

#[test]
fn criterion_3_rule_oracle() {
    // Hand-derived ramp firing time.
    let ramp_cfg = RuleConfig {
        hysteresis_db: 3.0,
        ttt_steps: 4,
        l3_k: 0,
        ..RuleConfig::default()
    };
    let (_, events) = run_rule(&ramp_trace(30), &ramp_cfg);
    assert_eq!(events.len(), 1);
    assert_eq!(
        (events[0].t_star, events[0].source, events[0].target),
        (17, CellId(0), CellId(1))
    );

    // L3 step response for k = 4: a = 0.5, so a unit step filters to
    // {0.5, 0.75, 0.875}.
    let alpha = l3_alpha(4);
    let mut f = 0.0;
    let mut response = Vec::new();
    for _ in 0..3 {
        f = l3_filter_step(f, 1.0, alpha);
        response.push(f);
    }
    assert_eq!(response, vec![0.5, 0.75, 0.875]);

    // The noise-free rule reproduces the generator's labels exactly.
    let trace = generate(&mild_scenario(TEST_SCENARIO_SEED)).unwrap();
    let reference = extract_handover_events(&trace);
    assert!(!reference.is_empty());
    let (hof_pct, _) = rule_hof(&trace, &reference, &RuleConfig::default()).unwrap();
    assert_eq!(hof_pct, 0.0, "clean rule HOF must be exactly 0%");
    println!(
        "criterion 3 (rule oracle): PASS — ramp fires at t=17, L3 step {{0.5, 0.75, 0.875}}, clean HOF 0.00% over {} events",
        reference.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: directional cold-start gap.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_cold_start_gap() {
    let w = world();
    let started = Instant::now();
    assert!(
        w.dense_events.len() >= MIN_TEST_EVENTS,
        "only {} test handover events",
        w.dense_events.len()
    );
    let stats = fit_normalization(&w.dense_test_meas).unwrap();
    let index = CellIndex::new(&w.dense_test_meas.topology);
    let curve = |params: &ModelParams, mode: EvalMode| -> Vec<f64> {
        acc_curve(
            params,
            &w.dense_test_meas,
            &stats,
            &index,
            &w.dense_events,
            &GAP_DELTAS,
            BIG_DELTA,
            STATE_HORIZON,
            mode,
        )
        .unwrap()
        .into_iter()
        .flat_map(|o| o.records)
        .collect()
    };
    // Both checkpoints come from the same seed; the asserted gap is the
    // ilcp checkpoint with state transfer vs the same events evaluated
    // from a fresh state at the handover (the cold start it replaces).
    let ilcp = curve(&w.ilcp, EvalMode::Ilcp);
    let cold = curve(&w.ilcp, EvalMode::Cold);
    let zk_cold = curve(&w.zk, EvalMode::Cold);
    assert_eq!(ilcp.len(), cold.len());
    let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    let diffs: Vec<f64> = ilcp.iter().zip(&cold).map(|(a, b)| a - b).collect();
    let ci = bootstrap_ci(&diffs, BOOTSTRAP_B, CI_LEVEL, GAP_BOOTSTRAP_SEED)
        .unwrap()
        .scale(100.0);
    assert!(
        ci.point > 0.0 && ci.lo > 0.0,
        "gap {:.3} pp, 95% CI [{:.3}, {:.3}] does not exclude 0",
        ci.point,
        ci.lo,
        ci.hi
    );
    let elapsed = w.gap_training_secs + started.elapsed().as_secs_f64();
    assert!(
        elapsed < GAP_BUDGET_SECS,
        "training + gap evaluation took {elapsed:.0} s >= {GAP_BUDGET_SECS} s"
    );
    println!(
        "criterion 4 (cold-start gap): PASS — {} events, ilcp {:.2}% vs cold {:.2}%, gap +{:.2} pp, 95% CI [{:.2}, {:.2}] \
         (reference figure +5.1 pp reported, not asserted; zero-knowledge checkpoint cold: {:.2}%), {:.0} s",
        w.dense_events.len(),
        mean(&ilcp),
        mean(&cold),
        ci.point,
        ci.lo,
        ci.hi,
        mean(&zk_cold),
        elapsed
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: directional robustness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_robustness() {
    // The sweep grids shipped in the default evaluation config are the
    // pinned ones.
    let defaults = EvalConfig::default();
    assert_eq!(defaults.sigma_sweep, SIGMA_GRID.to_vec());
    assert_eq!(defaults.blockage_sweep, BLOCKAGE_GRID.to_vec());
    assert_eq!(defaults.ssb_sweep, SSB_GRID.to_vec());

    let w = world();
    let index = CellIndex::new(&w.dense_test.topology);
    let hof_at = |measured: &Trace| -> f64 {
        let stats = fit_normalization(measured).unwrap();
        let acc = acc_at_delta(
            &w.robust,
            measured,
            &stats,
            &index,
            &w.dense_events,
            0,
            BIG_DELTA,
            STATE_HORIZON,
            EvalMode::Ilcp,
        )
        .unwrap()
        .accuracy_pct;
        100.0 - acc
    };
    let sigma12 = reporting_chain(&w.dense_test, ROBUST_SIGMA, TEST_CHAIN_SEED);

    // A3/A5 rule: exact on clean measurements, heavily degraded at σ = 12.
    let (rule_clean, _) = rule_hof(&w.dense_test, &w.dense_events, &dense_rule()).unwrap();
    let (rule_sigma12, _) = rule_hof(&sigma12, &w.dense_events, &dense_rule()).unwrap();
    assert_eq!(rule_clean, 0.0);
    assert!(
        rule_sigma12 >= RULE_HOF_MIN_FACTOR * rule_clean && rule_sigma12 > 0.0,
        "rule HOF at sigma 12 is {rule_sigma12:.2}% (clean {rule_clean:.2}%)"
    );

    // Robust-trained predictor: HOF grows by at most 1.5x.
    let ilcp_clean = hof_at(&w.dense_test);
    let ilcp_sigma12 = hof_at(&sigma12);
    assert!(
        ilcp_sigma12 <= ILCP_HOF_MAX_FACTOR * ilcp_clean,
        "robust HOF {ilcp_sigma12:.2}% > {ILCP_HOF_MAX_FACTOR} x clean {ilcp_clean:.2}%"
    );
    println!(
        "criterion 5 (robustness): PASS — rule HOF {rule_clean:.2}% -> {rule_sigma12:.2}%, robust HOF {ilcp_clean:.2}% -> {ilcp_sigma12:.2}% ({:.2}x <= {ILCP_HOF_MAX_FACTOR}x)",
        ilcp_sigma12 / ilcp_clean
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: closed-loop ping-pong ordering.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_ping_pong_ordering() {
    let w = world();
    let stats = fit_normalization(&w.mild_test).unwrap();
    let index = CellIndex::new(&w.mild_test.topology);
    let rate = |params: &ModelParams, mode: EvalMode| -> (f64, usize) {
        let events = closed_loop_events(params, &w.mild_test, &stats, &index, mode, 0).unwrap();
        let (pct, _) = ping_pong_rate(&events, PING_PONG_WINDOW);
        (pct, events.len())
    };
    let (pp_ilcp, n_ilcp) = rate(&w.mild_ilcp, EvalMode::Ilcp);
    let (pp_zk, n_zk) = rate(&w.mild_zk, EvalMode::Cold);
    assert!(
        pp_ilcp <= pp_zk,
        "closed-loop ping-pong: ilcp {pp_ilcp:.2}% > zero-knowledge {pp_zk:.2}%"
    );
    println!(
        "criterion 6 (ping-pong ordering): PASS — ilcp {pp_ilcp:.2}% ({n_ilcp} events) <= zero-knowledge {pp_zk:.2}% ({n_zk} events)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: inference latency.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_latency() {
    let params = ModelParams::init(ModelConfig::standard(9), 0).unwrap();
    let stats = latency_benchmark(&params, LATENCY_RUNS, 1).unwrap();
    assert_eq!(stats.runs, LATENCY_RUNS);
    assert!(
        stats.p99_ms < P99_BUDGET_MS,
        "p99 latency {:.3} ms >= {P99_BUDGET_MS} ms",
        stats.p99_ms
    );
    println!(
        "criterion 7 (latency): PASS — p50 {:.3} ms, p95 {:.3} ms, p99 {:.3} ms over {} runs",
        stats.p50_ms, stats.p95_ms, stats.p99_ms, stats.runs
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: bootstrap correctness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_bootstrap_correctness() {
    // A constant metric has a zero-width interval.
    let constant = vec![0.7; 17];
    let ci = bootstrap_ci(&constant, BOOTSTRAP_B, CI_LEVEL, 1).unwrap();
    assert_eq!(ci.hi - ci.lo, 0.0, "constant-metric CI has nonzero width");
    assert!((ci.point - 0.7).abs() < 1e-12);

    // Two events {0, 1}: each resample mean is 0, 0.5 or 1 with exact
    // probabilities 1/4, 1/2, 1/4; the empirical distribution over B draws
    // must match within the pinned tolerance.
    let records = [0.0, 1.0];
    let means = bootstrap_means(&records, BOOTSTRAP_B, ENUM_SEED).unwrap();
    let mut freq: BTreeMap<u64, f64> = BTreeMap::new();
    for m in &means {
        assert!(
            *m == 0.0 || *m == 0.5 || *m == 1.0,
            "impossible resample mean {m}"
        );
        *freq.entry(m.to_bits()).or_insert(0.0) += 1.0 / BOOTSTRAP_B as f64;
    }
    for (value, exact) in [(0.0, 0.25), (0.5, 0.5), (1.0, 0.25)] {
        let observed = freq.get(&f64::to_bits(value)).copied().unwrap_or(0.0);
        assert!(
            (observed - exact).abs() <= ENUM_TOL,
            "P(mean = {value}) = {observed:.3}, exact {exact} (tol {ENUM_TOL})"
        );
    }
    // At the 95% level both tails contain draws of the extreme means.
    let ci = bootstrap_ci(&records, BOOTSTRAP_B, CI_LEVEL, ENUM_SEED).unwrap();
    assert_eq!((ci.lo, ci.hi), (0.0, 1.0));

    // Empty event sets are an error, not a silent zero.
    assert!(bootstrap_ci(&[], BOOTSTRAP_B, CI_LEVEL, 1).is_err());
    println!(
        "criterion 8 (bootstrap correctness): PASS — zero-width constant CI, 2-event enumeration within {ENUM_TOL}, B={BOOTSTRAP_B} at {CI_LEVEL}%"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: byte-reproducibility of the command-line workflow.
// ---------------------------------------------------------------------------

const GEN_CONFIG: &str = r#"{"n_cells": 4, "n_ues": 3, "duration_steps": 600,
    "spacing_m": 200.0, "speed_min_mps": 20.0, "speed_max_mps": 30.0, "seed": 5}"#;
const TRAIN_CONFIG: &str = r#"{"max_epochs": 2, "windows_per_epoch": 8, "batch_sequences": 4,
    "warmup_steps": 4, "val_state_horizon": 8, "seed": 7}"#;
const EVAL_CONFIG: &str = r#"{"deltas": [0, 5], "bootstrap_b": 100, "state_horizon": 16,
    "latency_runs": 5, "closed_loop_max_steps": 80, "sigma_sweep": [0.0, 6.0],
    "blockage_sweep": [2], "ssb_sweep": [4], "seed": 3}"#;

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("scen.json"), GEN_CONFIG).unwrap();
    std::fs::write(p("train.json"), TRAIN_CONFIG).unwrap();
    std::fs::write(p("eval.json"), EVAL_CONFIG).unwrap();
    let run = |args: &[&std::ffi::OsStr]| {
        let out = Command::new(env!("CARGO_BIN_EXE_ilcp"))
            .env_remove("ILCP_SEED")
            .args(args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "command failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let os = |s: &str| std::ffi::OsString::from(s);
    for pass in ["a", "b"] {
        let gen_out = p(&format!("scen-{pass}"));
        let ck_out = p(&format!("ck-{pass}"));
        let ev_out = p(&format!("ev-{pass}"));
        run(&[&os("gen"), &os("--config"), p("scen.json").as_os_str(), &os("--out"), gen_out.as_os_str()]);
        run(&[
            &os("train"), &os("--mode"), &os("ilcp"), &os("--toy"), &os("--trace"), gen_out.as_os_str(),
            &os("--out"), ck_out.as_os_str(), &os("--config"), p("train.json").as_os_str(),
        ]);
        run(&[
            &os("eval"), &os("--ckpt"), ck_out.join("best.ckpt").as_os_str(),
            &os("--trace"), gen_out.as_os_str(), &os("--out"), ev_out.as_os_str(),
            &os("--config"), p("eval.json").as_os_str(),
        ]);
    }
    for f in [
        "scen-a/trace.csv",
        "scen-a/topology.json",
        "ck-a/best.ckpt",
        "ck-a/training_log.csv",
        "ev-a/report.json",
        "ev-a/postho_curve.csv",
        "ev-a/perturb_sweep.csv",
    ] {
        let a = std::fs::read(p(f)).unwrap();
        let b = std::fs::read(p(&f.replace("-a/", "-b/"))).unwrap();
        assert_eq!(a, b, "{f} differs between identical invocations");
    }
    println!(
        "criterion 9 (determinism): PASS — gen/train/eval artifacts byte-identical across repeat runs"
    );
}

