//! Command-line workflow driver: scenario generation, training, evaluation
//! with sweeps, and latent-payload inspection. Every command writes a
//! manifest next to its outputs with the fully resolved configuration and
//! seed, sufficient to reproduce the run byte-identically (wall-clock
//! fields excepted).

use clap::{Parser, Subcommand};
use ilcp::error::{Error, Result};
use ilcp::eval::{run_experiment, EvalConfig, ExperimentInputs};
use ilcp::graph::CellIndex;
use ilcp::model::{ModelConfig, ModelParams};
use ilcp::rules::RuleConfig;
use ilcp::synthgen::{generate, ScenarioConfig};
use ilcp::trace::{
    extract_handover_events, fit_normalization, parse_trace, split_by_trajectory, write_trace,
    Topology,
};
use ilcp::trainer::{fit, TrainConfig, TrainMode};
use ilcp::xn::deserialize_latent;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "ilcp",
    version,
    about = "Handover mobility prediction with latent recurrent-state transfer",
    after_help = "Config files are JSON with every field optional; omitted fields take the \
                  built-in defaults shown in each subcommand's help. Flags override file \
                  values, and the ILCP_SEED environment variable overrides every seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: trace CSV, topology JSON, manifest.
    Gen {
        /// Scenario config JSON (defaults: 3x3 grid, 8 UEs, 60 s).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a checkpoint on a generated scenario directory.
    Train {
        /// Directory holding trace.csv and topology.json.
        #[arg(long)]
        trace: PathBuf,
        /// ilcp (latent transfer) or zk (state reset baseline).
        #[arg(long)]
        mode: String,
        /// Train on the 0.5 : 0.5 clean : impaired mixture.
        #[arg(long)]
        robust: bool,
        #[arg(long)]
        out: PathBuf,
        /// Training config JSON overriding the built-in recipe.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the small architecture (smoke tests, CI).
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: report JSON, accuracy curve, impairment sweeps.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Zero-knowledge baseline checkpoint for the comparison columns.
        #[arg(long)]
        zk_ckpt: Option<PathBuf>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list from cold,warm,ilcp,rule (all by default).
        #[arg(long)]
        modes: Option<String>,
        /// Restrict sweeps: noise, blockage, ssb, or all.
        #[arg(long)]
        perturb: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode and print a 128-byte latent payload file.
    XnInspect { payload: PathBuf },
}

/// Written atomically next to every command's outputs.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: String,
    /// Wall clock; excluded from reproducibility comparisons.
    duration_secs: f64,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(manifest)?)?;
    std::fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(())
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

/// Seed precedence: ILCP_SEED env var, then --seed, then the config file.
fn resolve_seed(config_seed: u64, flag: Option<u64>) -> Result<u64> {
    if let Ok(v) = std::env::var("ILCP_SEED") {
        return v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("ILCP_SEED is not a u64: `{v}`")));
    }
    Ok(flag.unwrap_or(config_seed))
}

fn load_scenario_dir(dir: &Path) -> Result<ilcp::trace::Trace> {
    let topology = Topology::load(&dir.join("topology.json"))?;
    parse_trace(&dir.join("trace.csv"), topology)
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>, started: Instant) -> Result<()> {
    let mut cfg: ScenarioConfig = load_config(config)?;
    cfg.seed = resolve_seed(cfg.seed, seed)?;
    let trace = generate(&cfg)?;
    std::fs::create_dir_all(out)?;
    trace.topology.save(&out.join("topology.json"))?;
    write_trace(&trace, &out.join("trace.csv"))?;
    let events = extract_handover_events(&trace);
    eprintln!(
        "generated {} steps, {} UEs, {} handover events",
        trace.steps.len(),
        trace.ue_ids().len(),
        events.len()
    );
    write_manifest(
        out,
        &RunManifest {
            command: "gen".into(),
            config: serde_json::to_value(&cfg)?,
            seed: cfg.seed,
            inputs: vec![],
            outputs: vec!["topology.json".into(), "trace.csv".into()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: started.elapsed().as_secs_f64(),
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    trace_dir: &Path,
    mode: &str,
    robust: bool,
    out: &Path,
    config: Option<&Path>,
    toy: bool,
    seed: Option<u64>,
    started: Instant,
) -> Result<()> {
    let mode = match mode {
        "ilcp" => TrainMode::Ilcp,
        "zk" => TrainMode::ZeroKnowledge,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown training mode `{other}` (expected ilcp or zk)"
            )))
        }
    };
    let mut cfg: TrainConfig = load_config(config)?;
    cfg.mode = mode;
    cfg.robust = robust;
    cfg.seed = resolve_seed(cfg.seed, seed)?;
    let full = load_scenario_dir(trace_dir)?;
    let (train, val, _test) = split_by_trajectory(&full, (0.7, 0.15, 0.15), cfg.seed)?;
    let stats = fit_normalization(&train)?;
    let index = CellIndex::new(&full.topology);
    let n_cells = index.len();
    let model_cfg = if toy {
        ModelConfig::toy(n_cells)
    } else {
        ModelConfig::standard(n_cells)
    };
    let outcome = fit(model_cfg, &train, &val, &stats, &index, &cfg, out)?;
    eprintln!(
        "trained {} epochs, best val Acc@0 = {:.2}%",
        outcome.epochs_run, outcome.best_val_acc
    );
    write_manifest(
        out,
        &RunManifest {
            command: format!("train --mode {}{}", cfg.mode.name(), if robust { " --robust (mixture 0.5:0.5)" } else { "" }),
            config: serde_json::to_value(&cfg)?,
            seed: cfg.seed,
            inputs: vec![trace_dir.display().to_string()],
            outputs: vec!["best.ckpt".into(), "training_log.csv".into()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: started.elapsed().as_secs_f64(),
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    zk_ckpt: Option<&Path>,
    trace_dir: &Path,
    out: &Path,
    modes: Option<&str>,
    perturb: Option<&str>,
    config: Option<&Path>,
    seed: Option<u64>,
    started: Instant,
) -> Result<()> {
    if let Some(list) = modes {
        for m in list.split(',') {
            if !["cold", "warm", "ilcp", "rule"].contains(&m.trim()) {
                return Err(Error::InvalidConfig(format!(
                    "unknown evaluation mode `{m}` (expected cold, warm, ilcp or rule)"
                )));
            }
        }
    }
    let mut cfg: EvalConfig = load_config(config)?;
    cfg.seed = resolve_seed(cfg.seed, seed)?;
    match perturb {
        None | Some("all") => {}
        Some("noise") => {
            cfg.blockage_sweep.clear();
            cfg.ssb_sweep.clear();
        }
        Some("blockage") => {
            cfg.sigma_sweep.clear();
            cfg.ssb_sweep.clear();
        }
        Some("ssb") => {
            cfg.sigma_sweep.clear();
            cfg.blockage_sweep.clear();
        }
        Some(other) => {
            return Err(Error::InvalidConfig(format!(
                "unknown perturbation spec `{other}` (expected noise, blockage, ssb or all)"
            )))
        }
    }
    let params = ModelParams::load(ckpt)?;
    let zk_params = zk_ckpt.map(ModelParams::load).transpose()?;
    let test = load_scenario_dir(trace_dir)?;
    let stats = fit_normalization(&test)?;
    let index = CellIndex::new(&test.topology);
    let rule = RuleConfig::default();
    let report = run_experiment(
        &ExperimentInputs {
            ilcp: &params,
            zero_knowledge: zk_params.as_ref(),
            test: &test,
            stats: &stats,
            index: &index,
            rule: &rule,
            config: &cfg,
        },
        out,
    )?;
    for (name, ci) in &report.metrics {
        eprintln!("{name}: {:.2} [{:.2}, {:.2}]", ci.point, ci.lo, ci.hi);
    }
    let mut outputs = vec![
        "report.json".into(),
        "postho_curve.csv".into(),
        "perturb_sweep.csv".into(),
    ];
    if report.latency.is_some() {
        outputs.push("latency.json".into());
    }
    write_manifest(
        out,
        &RunManifest {
            command: "eval".into(),
            config: serde_json::to_value(&cfg)?,
            seed: cfg.seed,
            inputs: {
                let mut v = vec![ckpt.display().to_string(), trace_dir.display().to_string()];
                if let Some(z) = zk_ckpt {
                    v.push(z.display().to_string());
                }
                v
            },
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: started.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_xn_inspect(payload: &Path) -> Result<()> {
    let bytes = std::fs::read(payload)?;
    let values = deserialize_latent(&bytes)?;
    for (i, v) in values.iter().enumerate() {
        println!("z[{i:2}] = {v}");
    }
    println!("valid: 128-byte payload, all 32 values finite");
    Ok(())
}

fn main() {
    let started = Instant::now();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { config, out, seed } => cmd_gen(config.as_deref(), out, *seed, started),
        Command::Train {
            trace,
            mode,
            robust,
            out,
            config,
            toy,
            seed,
        } => cmd_train(trace, mode, *robust, out, config.as_deref(), *toy, *seed, started),
        Command::Eval {
            ckpt,
            zk_ckpt,
            trace,
            out,
            modes,
            perturb,
            config,
            seed,
        } => cmd_eval(
            ckpt,
            zk_ckpt.as_deref(),
            trace,
            out,
            modes.as_deref(),
            perturb.as_deref(),
            config.as_deref(),
            *seed,
            started,
        ),
        Command::XnInspect { payload } => cmd_xn_inspect(payload),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
