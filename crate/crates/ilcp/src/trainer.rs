//! Training loop: truncated backprop over subsampled trajectory windows,
//! AdamW with decoupled weight decay, gradient accumulation across windows,
//! and early stopping on validation Acc@t=0.
//!
//! Two training modes share everything except the handover instant: `ilcp`
//! runs the compress → decode → project path (with the variational loss and
//! inbound dropout), `zero_knowledge` resets the state to the fresh
//! initialization and never touches the codec.

use crate::error::{Error, Result};
use crate::eval::{self, acc_at_delta, EvalMode, Timeline};
use crate::graph::{build_candidates, CellIndex};
use crate::model::{
    candidate_embeddings, candidate_probs, prediction_loss, vae_loss, ModelConfig, ModelParams,
    TapeModel,
};
use crate::perturb::{apply_draw, MixedConfig, MixedSampler};
use crate::trace::{extract_handover_events, NormalizationStats, Split, Trace, UeId};
use crate::diffcore::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Ilcp,
    ZeroKnowledge,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Ilcp => "ilcp",
            TrainMode::ZeroKnowledge => "zero_knowledge",
        }
    }

    fn eval_mode(&self) -> EvalMode {
        match self {
            TrainMode::Ilcp => EvalMode::Ilcp,
            TrainMode::ZeroKnowledge => EvalMode::Cold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Windows accumulated into one optimizer step.
    pub batch_sequences: usize,
    /// Backprop-through-time length in steps.
    pub window_steps: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Train on the impairment mixture (labels stay clean).
    pub robust: bool,
    /// Prediction horizon Δ used for labels and validation.
    pub delta: u64,
    /// Windows drawn per epoch.
    pub windows_per_epoch: usize,
    /// Probability that a drawn window is anchored on a handover.
    pub handover_bias: f64,
    /// Gradient-free prefix replayed before each window to seed the state.
    pub warmup_steps: usize,
    /// History replayed when computing validation Acc@t=0.
    pub val_state_horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-4,
            batch_sequences: 32,
            window_steps: 16,
            max_epochs: 80,
            patience: 8,
            seed: 0,
            mode: TrainMode::Ilcp,
            robust: false,
            delta: 10,
            windows_per_epoch: 128,
            handover_bias: 0.75,
            warmup_steps: 16,
            val_state_horizon: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_steps == 0 || self.batch_sequences == 0 || self.windows_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "window, batch and per-epoch counts must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.handover_bias) {
            return Err(Error::InvalidConfig("handover bias must be in [0, 1]".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// AdamW moment buffers, keyed like the parameter blocks.
#[derive(Debug, Default)]
pub struct OptimizerState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> OptimizerState {
        OptimizerState::default()
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay. The fresh-start state
/// `h_init` is a fixed design constant and is never updated. Decay applies
/// to every updated block even when its gradient is zero.
pub fn adamw_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for name in params.trainable_names() {
        if name == "h_init" {
            continue;
        }
        let w = &mut params.blocks.get_mut(&name).unwrap().1;
        let n = w.len();
        let zero = vec![0.0; n];
        let g = grads.get(&name).unwrap_or(&zero);
        assert_eq!(g.len(), n, "gradient shape mismatch for {name}");
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
        let m = opt.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = opt.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * w[i]);
        }
    }
    Ok(())
}

/// Per-epoch aggregates; `n_vae_terms` counts variational-loss terms, which
/// must stay zero in zero-knowledge mode.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub n_windows: usize,
    pub n_pred_terms: usize,
    pub n_vae_terms: usize,
}

struct WindowResult {
    grads: BTreeMap<String, Vec<f64>>,
    loss: f64,
    n_pred: usize,
    n_vae: usize,
}

/// Runs the gradient-free warmup prefix ending just before `start`,
/// mode-consistently across any handovers it contains.
#[allow(clippy::too_many_arguments)]
fn warmup_state(
    params: &ModelParams,
    measured: &Trace,
    stats: &NormalizationStats,
    index: &CellIndex,
    ue: UeId,
    tl: &Timeline,
    start: usize,
    steps: usize,
    mode: TrainMode,
) -> Result<Vec<f64>> {
    let mut h = eval::h_init_value(params);
    for i in start.saturating_sub(steps)..start {
        let handover = tl.is_handover(i);
        if handover && mode == TrainMode::ZeroKnowledge {
            h = eval::h_init_value(params);
        }
        let out = eval::step_once(
            params,
            measured,
            stats,
            index,
            ue,
            tl.times[i],
            tl.serving[i],
            &h,
            handover && mode == TrainMode::Ilcp,
            mode.eval_mode(),
        )?;
        h = out.h;
    }
    Ok(h)
}

/// Forward + backward over one window on a single tape. Inputs come from
/// `measured` (possibly impaired); labels and handover instants come from
/// the clean timeline. Returns `None` when no step in the window yields a
/// usable prediction target.
#[allow(clippy::too_many_arguments)]
fn process_window(
    params: &ModelParams,
    measured: &Trace,
    stats: &NormalizationStats,
    index: &CellIndex,
    ue: UeId,
    tl: &Timeline,
    start: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<WindowResult>> {
    let h0 = warmup_state(
        params, measured, stats, index, ue, tl, start, cfg.warmup_steps, cfg.mode,
    )?;
    let tape = Tape::new();
    let model = TapeModel::new(&tape, params);
    let mut h = tape.leaf(1, params.config.d_h, &h0);
    let mut pred_events = Vec::new();
    let mut vae_terms = Vec::new();
    let end = (start + cfg.window_steps).min(tl.times.len());
    for i in start..end {
        let t = tl.times[i];
        let snap = match crate::graph::build_snapshot_for_ue(measured, t, ue, stats, index) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let enc = model.encode_snapshot(&snap, index);
        let x = enc.ue[0];
        let cand = build_candidates(&snap, ue, index)?;
        let emb = candidate_embeddings(&tape, &enc, &cand);

        if tl.is_handover(i) {
            match cfg.mode {
                TrainMode::Ilcp => {
                    // Reparameterized sample through the codec, then the
                    // gated projection with inbound dropout.
                    let eps: Vec<f64> = (0..params.config.d_z)
                        .map(|_| StandardNormal.sample(rng))
                        .collect();
                    let eps = tape.leaf(1, params.config.d_z, &eps);
                    let compressed = model.vae_compress(h, Some(eps));
                    let h_tilde = model.vae_decode(compressed.z);
                    vae_terms.push(vae_loss(
                        &tape,
                        h,
                        h_tilde,
                        compressed.mu,
                        compressed.logvar,
                        params.config.beta,
                    ));
                    h = model.project(h_tilde, x, true, rng);
                }
                TrainMode::ZeroKnowledge => {
                    h = model.gru_step(model.h_init(), x);
                }
            }
        } else {
            h = model.gru_step(h, x);
        }
        // Handover instants score straight off the projected (or reset)
        // state; ordinary steps score off the recurrent update.
        if let Some(label) = tl.serving_at(t + cfg.delta) {
            if let Some(slot) = cand.slot_of(label) {
                let scores = model.score_candidates(h, emb, &cand.mask);
                pred_events.push((candidate_probs(&tape, scores, &cand.mask), slot));
            }
        }
    }
    if pred_events.is_empty() {
        return Ok(None);
    }
    let pred = prediction_loss(&tape, &pred_events);
    let mut loss = tape.scale(pred.total, 1.0 / pred.n_events as f64);
    if !vae_terms.is_empty() {
        let mut v = vae_terms[0];
        for &t in &vae_terms[1..] {
            v = tape.add(v, t);
        }
        loss = tape.add(loss, tape.scale(v, 1.0 / vae_terms.len() as f64));
    }
    let loss_value = tape.scalar_value(loss);
    tape.backward(loss);
    let mut grads = BTreeMap::new();
    for (name, tensor) in model.blocks() {
        grads.insert(name.clone(), tape.grad(*tensor));
    }
    Ok(Some(WindowResult {
        grads,
        loss: loss_value,
        n_pred: pred.n_events,
        n_vae: vae_terms.len(),
    }))
}

/// Handover-biased window draws for one epoch, deterministic in
/// (config seed, epoch).
struct UePlan {
    ue: UeId,
    tl: Timeline,
    handover_positions: Vec<usize>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn build_plans(train: &Trace) -> Vec<UePlan> {
    train
        .ue_ids()
        .into_iter()
        .map(|ue| {
            let tl = eval::timeline(train, ue);
            let handover_positions = (0..tl.times.len()).filter(|&i| tl.is_handover(i)).collect();
            UePlan {
                ue,
                tl,
                handover_positions,
            }
        })
        .filter(|p| !p.tl.times.is_empty())
        .collect()
}

/// One epoch of accumulated-gradient AdamW over subsampled windows.
pub fn train_epoch(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    train: &Trace,
    stats: &NormalizationStats,
    index: &CellIndex,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    let plans = build_plans(train);
    if plans.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut sampler = if cfg.robust {
        Some(MixedSampler::new(MixedConfig::default(), cfg.seed ^ (epoch as u64 + 1))?)
    } else {
        None
    };
    let mixed = MixedConfig::default();
    let mut per_ue_clean: BTreeMap<UeId, Trace> = BTreeMap::new();

    let mut acc_grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut acc_windows = 0usize;
    let mut stats_out = EpochStats {
        mean_loss: 0.0,
        n_windows: 0,
        n_pred_terms: 0,
        n_vae_terms: 0,
    };
    let mut loss_sum = 0.0;

    for batch in 0..cfg.windows_per_epoch {
        let plan = &plans[rng.gen_range(0..plans.len())];
        let len = plan.tl.times.len();
        let anchored = !plan.handover_positions.is_empty()
            && rng.gen::<f64>() < cfg.handover_bias;
        let start = if anchored {
            let ho = plan.handover_positions[rng.gen_range(0..plan.handover_positions.len())];
            ho.saturating_sub(rng.gen_range(0..cfg.window_steps))
        } else {
            rng.gen_range(0..len)
        }
        .min(len.saturating_sub(cfg.window_steps));

        let measured_owned;
        let measured: &Trace = match sampler.as_mut() {
            Some(s) => {
                let clean = per_ue_clean
                    .entry(plan.ue)
                    .or_insert_with(|| train.restrict(&[plan.ue], Split::Train));
                let spec = s.draw();
                let (m, _) = apply_draw(clean, &spec, &mixed)?;
                measured_owned = m;
                &measured_owned
            }
            None => train,
        };

        if let Some(w) = process_window(
            params, measured, stats, index, plan.ue, &plan.tl, start, cfg, &mut rng,
        )? {
            if !w.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            loss_sum += w.loss;
            stats_out.n_windows += 1;
            stats_out.n_pred_terms += w.n_pred;
            stats_out.n_vae_terms += w.n_vae;
            for (name, g) in w.grads {
                acc_grads
                    .entry(name)
                    .and_modify(|a| a.iter_mut().zip(&g).for_each(|(x, y)| *x += y))
                    .or_insert(g);
            }
            acc_windows += 1;
        }
        if acc_windows == cfg.batch_sequences || (batch + 1 == cfg.windows_per_epoch && acc_windows > 0) {
            for g in acc_grads.values_mut() {
                g.iter_mut().for_each(|x| *x /= acc_windows as f64);
            }
            adamw_step(params, opt, &acc_grads, cfg.lr, cfg.weight_decay)?;
            acc_grads.clear();
            acc_windows = 0;
        }
    }
    stats_out.mean_loss = if stats_out.n_windows == 0 {
        f64::NAN
    } else {
        loss_sum / stats_out.n_windows as f64
    };
    Ok(stats_out)
}

#[derive(Debug)]
pub struct FitOutcome {
    pub params: ModelParams,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub log: Vec<String>,
}

/// Full training run with early stopping on validation Acc@t=0. Writes
/// `training_log.csv` and the best checkpoint (`best.ckpt`) into `out_dir`.
pub fn fit(
    model_cfg: ModelConfig,
    train: &Trace,
    val: &Trace,
    stats: &NormalizationStats,
    index: &CellIndex,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::new();
    let val_events = extract_handover_events(val);
    if val_events.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let mut best = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut log = vec!["epoch,train_loss,val_acc,lr,mode,robust".to_string()];
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let ep = train_epoch(&mut params, &mut opt, train, stats, index, cfg, epoch)?;
        let val_acc = acc_at_delta(
            &params,
            val,
            stats,
            index,
            &val_events,
            0,
            cfg.delta,
            cfg.val_state_horizon,
            cfg.mode.eval_mode(),
        )?
        .accuracy_pct;
        log.push(format!(
            "{epoch},{},{},{},{},{}",
            ep.mean_loss,
            val_acc,
            cfg.lr,
            cfg.mode.name(),
            cfg.robust
        ));
        epochs_run = epoch;
        if val_acc > best_val {
            best_val = val_acc;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    std::fs::write(out_dir.join("training_log.csv"), log.join("\n") + "\n")?;
    best.save(&out_dir.join("best.ckpt"))?;
    Ok(FitOutcome {
        params: best,
        best_val_acc: best_val,
        epochs_run,
        log,
    })
}
