//! Command-line front end for the full workflow:
//! synth -> opam -> train -> eval -> rollout -> sweep, plus grad-check.
//!
//! Every run writes `run.json` (the fully resolved config) into the output
//! directory before any other artifact; re-running a subcommand with that
//! file as `--config` reproduces the outputs bit for bit. Exit codes:
//! 0 success, 1 runtime failure, 2 config or usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ofa::losses::TargetMode;
use ofa::rollout::{attention_rollout, heatmap_volume, organ_attention_mass, write_pgm_slice};
use ofa::runconfig::{ConfigError, RunConfig};
use ofa::train::{append_eval_csv, evaluate, full_loss_grad_check, sweep, train};
use ofa::volgrid::partition;
use ofa::vvol::{load_mask, load_volume, save_matrix, save_volume};

#[derive(Parser)]
#[command(
    name = "ofa",
    version,
    about = "Organ-focused attention: train volumetric classifiers whose attention is supervised by segmentation, then run them without it"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; defaults apply for anything unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts of this run.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap; 1 is fully serial.
    #[arg(long)]
    threads: Option<usize>,
    /// Dotted-key config overrides, e.g. --set train.alpha=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset and manifest.
    Synth(Common),
    /// Dump the co-attention matrix M and its softmax target M' for a mask.
    Opam {
        #[command(flatten)]
        common: Common,
        /// Segmentation mask volume (VVOL u8).
        #[arg(long)]
        mask: PathBuf,
    },
    /// Train a classifier per the config.
    Train(Common),
    /// Evaluate a checkpoint: threshold on validation, report on test.
    Eval(Common),
    /// Attention rollout and heatmap export for one volume.
    Rollout(Common),
    /// Train+evaluate every (layer preset, alpha) grid cell into a CSV.
    Sweep(Common),
    /// Finite-difference certification of the full training loss.
    GradCheck(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run) = match &cli.command {
        Command::Synth(c) => (c, run_synth as Runner),
        Command::Opam { common, .. } => (common, run_opam as Runner),
        Command::Train(c) => (c, run_train as Runner),
        Command::Eval(c) => (c, run_eval as Runner),
        Command::Rollout(c) => (c, run_rollout as Runner),
        Command::Sweep(c) => (c, run_sweep as Runner),
        Command::GradCheck(c) => (c, run_grad_check as Runner),
    };
    let cfg = match resolve_config(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = write_run_json(&cfg, &common.out) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(&cli.command, &cfg, &common.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

type Runner = fn(&Command, &RunConfig, &Path) -> Result<(), CmdError>;

enum CmdError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<ofa::train::TrainError> for CmdError {
    fn from(e: ofa::train::TrainError) -> Self {
        match e {
            ofa::train::TrainError::Config(msg) => CmdError::Config(msg),
            other => CmdError::Runtime(other.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Runtime(e.to_string())
}

fn resolve_config(common: &Common) -> Result<RunConfig, ConfigError> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(threads) = common.threads {
        overrides.push(format!("threads={threads}"));
    }
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

/// The resolved-config echo is always the first artifact written.
fn write_run_json(cfg: &RunConfig, out: &Path) -> Result<(), std::io::Error> {
    std::fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(out.join("run.json"), text)
}

fn run_synth(_cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    let mut synth_cfg = cfg.synth.clone();
    synth_cfg.seed = cfg.seed;
    synth_cfg.validate().map_err(|e| CmdError::Config(e.to_string()))?;
    let manifest = ofa::synth::generate(&synth_cfg, out).map_err(runtime)?;
    let check = ofa::synth::bayes_check(&synth_cfg, 200).map_err(runtime)?;
    let summary = serde_json::json!({
        "samples": manifest.len(),
        "manifest": out.join("manifest.json"),
        "oracle_auc": check.oracle_auc,
        "background_auc": check.background_auc,
    });
    std::fs::write(
        out.join("synth_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(runtime)?;
    println!("wrote {} samples; oracle AUC {:.3}", manifest.len(), check.oracle_auc);
    Ok(())
}

fn run_opam(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    let Command::Opam { mask, .. } = cmd else { unreachable!("dispatch") };
    let mask = load_mask(mask).map_err(|e| CmdError::Config(e.to_string()))?;
    let grid = partition(mask.dims(), cfg.vit.patch_size)
        .map_err(|e| CmdError::Config(e.to_string()))?;
    let opam = ofa::opam::build_opam_with_threshold(&mask, &grid, cfg.train.min_overlap_voxels)
        .map_err(runtime)?;
    let n = opam.n();
    save_matrix(n, &opam.to_f64(), &out.join("opam_m.vmat")).map_err(runtime)?;
    let target = match cfg.train.target_mode {
        TargetMode::ExcludeCls => ofa::opam::softmax_target(&opam),
        TargetMode::IncludeCls => ofa::opam::softmax_target_with_cls(&opam),
    };
    save_matrix(target.n(), target.values(), &out.join("opam_mprime.vmat")).map_err(runtime)?;
    println!("N = {n}, organ patches = {}", opam.organ_patch_set().len());
    Ok(())
}

fn run_train(_cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    let t = train(cfg, out)?;
    println!(
        "best epoch {} (val AUC {:.4}); checkpoints in {}",
        t.best_epoch,
        t.best_val_auc,
        out.display()
    );
    Ok(())
}

fn run_eval(_cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    if cfg.eval.checkpoint.is_empty() {
        return Err(CmdError::Config("eval.checkpoint is required".into()));
    }
    let e = evaluate(cfg, Path::new(&cfg.eval.checkpoint), cfg.eval.threshold_on_test)?;
    let text = serde_json::to_string_pretty(&e).expect("eval output serializes");
    std::fs::write(out.join("metrics.json"), &text).map_err(runtime)?;
    append_eval_csv(
        &out.join("results.csv"),
        if cfg.train.alpha == 0.0 { "baseline" } else { "ofa" },
        cfg.train.alpha,
        &cfg.train.ofa_layers.to_string(),
        &e.report,
    )?;
    println!("{text}");
    Ok(())
}

fn run_rollout(_cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    if cfg.rollout.checkpoint.is_empty() || cfg.rollout.volume.is_empty() {
        return Err(CmdError::Config("rollout.checkpoint and rollout.volume are required".into()));
    }
    let (params, _) = ofa::vit::load_checkpoint(Path::new(&cfg.rollout.checkpoint))
        .map_err(|e| CmdError::Config(e.to_string()))?;
    let volume = load_volume(Path::new(&cfg.rollout.volume)).map_err(runtime)?;
    let fp = ofa::vit::forward(&params, &volume).map_err(runtime)?;
    let rollout = attention_rollout(&fp.attention_stack()).map_err(runtime)?;
    let grid = params.config.grid();
    let heatmap = heatmap_volume(&rollout, &grid, volume.dims()).map_err(runtime)?;
    save_volume(&heatmap, &out.join("heatmap.vvol")).map_err(runtime)?;
    for &z in &cfg.rollout.slices {
        if z >= volume.dims()[0] {
            return Err(CmdError::Config(format!("slice {z} out of {}", volume.dims()[0])));
        }
        write_pgm_slice(&heatmap, z, &out.join(format!("heatmap_z{z:03}.pgm")))
            .map_err(runtime)?;
    }

    // The mask is optional and only feeds the summary statistic.
    let mass = match &cfg.rollout.mask {
        Some(mask_path) => {
            let mask = load_mask(Path::new(mask_path)).map_err(runtime)?;
            let sets = ofa::volgrid::organ_patches(&mask, &grid).map_err(runtime)?;
            let organ: Vec<usize> = (0..grid.patch_count()).filter(|&p| !sets[p].is_empty()).collect();
            Some(organ_attention_mass(&rollout, &organ))
        }
        None => None,
    };
    let record = serde_json::json!({
        "organ_attention_mass": mass,
        "logit": fp.logit_value(),
        "heatmap": out.join("heatmap.vvol"),
    });
    let text = serde_json::to_string_pretty(&record).expect("rollout record serializes");
    std::fs::write(out.join("rollout.json"), &text).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

fn run_sweep(_cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    let s = sweep(cfg, out)?;
    println!("{}", ofa::train::SWEEP_CSV_HEADER);
    for r in &s.rows {
        println!(
            "{},{},{},{},{},{},{}",
            r.method, r.alpha, r.layers, r.auc, r.precision, r.recall, r.f1
        );
    }
    if !s.failures.is_empty() {
        for (cell, err) in &s.failures {
            eprintln!("cell {cell} failed: {err}");
        }
        return Err(CmdError::Runtime(format!("{} sweep cell(s) failed", s.failures.len())));
    }
    Ok(())
}

fn run_grad_check(_cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    let report = full_loss_grad_check(cfg)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("gradcheck.json"), &text).map_err(runtime)?;
    println!("{text}");
    const TOLERANCE: f64 = 1e-4;
    if report.max_rel_err < TOLERANCE {
        Ok(())
    } else {
        Err(CmdError::Runtime(format!(
            "max relative error {} exceeds {TOLERANCE}",
            report.max_rel_err
        )))
    }
}
