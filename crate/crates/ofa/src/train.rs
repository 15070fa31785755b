//! Training loop, evaluation driver, and the ablation sweep.
//!
//! Supervision targets are built from masks once per unique (mask, grid)
//! pair and cached; the inference path (scoring, eval, rollout) never opens
//! a mask file. Batches run per-sample forward/backward graphs in parallel,
//! but gradients are reduced in fixed sample order and divided once, so the
//! result is bitwise identical at any thread count.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{augment_mask, augment_volume, draw_augment, stratified_split, DataError, Manifest};
use crate::diff::sigmoid;
use crate::losses::{sample_loss, LossBreakdown, LossError, TargetMode};
use crate::metrics::{prf1, roc_auc, youden_threshold, MetricsError, MetricsReport, ScoredSet};
use crate::opam::{build_opam_with_threshold, softmax_target, softmax_target_with_cls, OpamTarget};
use crate::optim::{adam_step, AdamParams, AdamState, OptimError};
use crate::rng;
use crate::runconfig::RunConfig;
use crate::vit::{forward, init, load_checkpoint, save_checkpoint, VitError, VitParams};
use crate::volgrid::{PatchGrid, SegMask, VolError, Volume};
use crate::vvol::{load_volume, VvolError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error(transparent)]
    Ckpt(#[from] crate::ckpt::CkptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error(transparent)]
    Vvol(#[from] VvolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Supervision targets cached by (mask bytes, grid, threshold, mode) hash.
/// Targets are constant across epochs, so each unique mask is processed
/// once.
#[derive(Default)]
pub struct OpamCache {
    map: Mutex<HashMap<u64, Arc<OpamTarget>>>,
}

impl OpamCache {
    pub fn get_or_build(
        &self,
        mask: &SegMask,
        grid: &PatchGrid,
        min_voxels: usize,
        mode: TargetMode,
    ) -> Result<Arc<OpamTarget>, VolError> {
        let key = cache_key(mask, grid, min_voxels, mode);
        if let Some(hit) = self.map.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let opam = build_opam_with_threshold(mask, grid, min_voxels)?;
        let target = Arc::new(match mode {
            TargetMode::ExcludeCls => softmax_target(&opam),
            TargetMode::IncludeCls => softmax_target_with_cls(&opam),
        });
        self.map.lock().expect("cache lock").insert(key, target.clone());
        Ok(target)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn cache_key(mask: &SegMask, grid: &PatchGrid, min_voxels: usize, mode: TargetMode) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for &b in mask.labels() {
        eat(b);
    }
    for d in mask.dims().into_iter().chain(grid.patch_size()) {
        for b in (d as u64).to_le_bytes() {
            eat(b);
        }
    }
    for b in (min_voxels as u64).to_le_bytes() {
        eat(b);
    }
    eat(match mode {
        TargetMode::ExcludeCls => 0,
        TargetMode::IncludeCls => 1,
    });
    h
}

struct PreparedSample {
    volume: Volume,
    mask: Option<SegMask>,
    label: u8,
    target: Option<Arc<OpamTarget>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub l_cls: f64,
    pub l_ofa_total: Option<f64>,
    pub auc: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub epoch_records: Vec<EpochRecord>,
    pub final_params: VitParams,
}

struct SampleRun {
    grad: Vec<f64>,
    breakdown: LossBreakdown,
    logit: f64,
}

/// Train per the run config, writing `losses.jsonl`, `epochs.jsonl`,
/// `best.ckpt` (highest validation AUC), and `last.ckpt` (resumable) into
/// `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutput, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    std::fs::create_dir_all(out_dir)?;
    let pool = build_pool(cfg.threads)?;
    let manifest = Manifest::load(Path::new(&cfg.data.manifest))?;
    let labels = manifest.labels();
    let splits = stratified_split(&labels, cfg.data.ratios, cfg.seed)?;

    let mut vit_cfg = cfg.vit.clone();
    vit_cfg.seed = cfg.seed;
    let grid = vit_cfg.validate()?;
    let alpha = cfg.train.alpha;
    let selection = cfg.train.ofa_layers.validate(vit_cfg.layers)?;
    if alpha > 0.0 && selection.is_empty() {
        return Err(LossError::EmptySelection.into());
    }

    // Pull the dataset into memory. Masks are only touched when the
    // supervision loss is active.
    let cache = OpamCache::default();
    let need_masks = alpha > 0.0;
    let mut samples = Vec::with_capacity(manifest.len());
    let train_set: std::collections::HashSet<usize> = splits.train.iter().copied().collect();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let volume = load_volume(&manifest.base_dir.join(&entry.volume))?;
        if volume.dims() != vit_cfg.input_dims {
            return Err(TrainError::Config(format!(
                "sample {i} dims {:?} do not match vit.input_dims {:?}",
                volume.dims(),
                vit_cfg.input_dims
            )));
        }
        let mask = match (&entry.mask, need_masks) {
            (Some(m), true) => Some(crate::vvol::load_mask(&manifest.base_dir.join(m))?),
            (None, true) if train_set.contains(&i) => {
                return Err(DataError::MissingMask { index: i }.into())
            }
            _ => None,
        };
        let target = match (&mask, need_masks) {
            (Some(m), true) if !cfg.train.augment => Some(cache.get_or_build(
                m,
                &grid,
                cfg.train.min_overlap_voxels,
                cfg.train.target_mode,
            )?),
            _ => None,
        };
        samples.push(PreparedSample { volume, mask, label: entry.label, target });
    }

    // Fresh or resumed state.
    let mut params;
    let mut adam;
    let mut start_epoch = 0usize;
    let mut best_val_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let hyper = AdamParams { lr: cfg.train.lr, ..AdamParams::default() };
    if let Some(resume) = &cfg.train.resume {
        let (p, tf) = load_checkpoint(Path::new(resume))?;
        if p.config != vit_cfg {
            return Err(TrainError::Config(
                "resume checkpoint config does not match the run config".into(),
            ));
        }
        let extra = &tf.meta["extra"];
        let mut state = AdamState::new(p.n_params(), hyper);
        state.m.copy_from_slice(tf.get("adam.m")?.2);
        state.v.copy_from_slice(tf.get("adam.v")?.2);
        state.t = extra["adam_t"].as_u64().unwrap_or(0);
        start_epoch = extra["epoch"].as_u64().unwrap_or(0) as usize + 1;
        best_val_auc = extra["best_val_auc"].as_f64().unwrap_or(f64::NEG_INFINITY);
        best_epoch = extra["best_epoch"].as_u64().unwrap_or(0) as usize;
        params = p;
        adam = state;
    } else {
        params = init(&vit_cfg)?;
        adam = AdamState::new(params.n_params(), hyper);
    }

    let mut losses_log = BufWriter::new(File::create(out_dir.join("losses.jsonl"))?);
    let mut epochs_log = BufWriter::new(File::create(out_dir.join("epochs.jsonl"))?);
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut epoch_records = Vec::new();
    let mut step: u64 = adam.t;

    for epoch in start_epoch..cfg.train.epochs {
        let order = {
            use rand::seq::SliceRandom;
            let mut order = splits.train.clone();
            let mut rng = rng::stream(cfg.seed, "epoch-shuffle", &[epoch as u64]);
            order.shuffle(&mut rng);
            order
        };

        let mut running = RunningMeans::default();
        let mut train_scores: Vec<f64> = Vec::with_capacity(order.len());
        let mut train_labels: Vec<u8> = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.train.batch_size) {
            let runs: Result<Vec<SampleRun>, TrainError> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&idx| {
                        run_train_sample(
                            cfg, &vit_cfg, &params, &samples[idx], idx, epoch, &grid, &cache,
                            &selection,
                        )
                    })
                    .collect()
            });
            let runs = runs?;

            // Fixed-order reduction: sum in batch order, divide once.
            let mut grad = vec![0.0f64; params.n_params()];
            for run in &runs {
                for (g, s) in grad.iter_mut().zip(&run.grad) {
                    *g += s;
                }
            }
            let inv = 1.0 / runs.len() as f64;
            for g in grad.iter_mut() {
                *g *= inv;
            }
            adam_step(&mut params.data, &grad, &mut adam)?;
            step += 1;

            for (run, &idx) in runs.iter().zip(batch) {
                running.push(&run.breakdown);
                train_scores.push(sigmoid(run.logit));
                train_labels.push(samples[idx].label);
            }
            if step % cfg.train.log_every.max(1) as u64 == 0 {
                writeln!(losses_log, "{}", running.step_line(step, &runs, alpha))?;
            }
        }
        losses_log.flush()?;

        // Epoch records: running train metrics plus a fresh validation pass.
        let train_auc = roc_auc(&ScoredSet::new(train_scores, train_labels)?)?;
        let train_rec = EpochRecord {
            epoch,
            split: "train".into(),
            l_cls: running.mean_l_cls(),
            l_ofa_total: running.mean_l_ofa(),
            auc: train_auc,
        };
        let val_rec = evaluate_split_record(
            cfg, &pool, &params, &samples, &splits.val, epoch, &selection,
        )?;
        for rec in [&train_rec, &val_rec] {
            writeln!(epochs_log, "{}", serde_json::to_string(rec)?)?;
        }
        epochs_log.flush()?;

        if val_rec.auc > best_val_auc {
            best_val_auc = val_rec.auc;
            best_epoch = epoch;
            save_state(&params, &adam, epoch, best_val_auc, best_epoch, &best_path)?;
        }
        save_state(&params, &adam, epoch, best_val_auc, best_epoch, &last_path)?;
        epoch_records.push(train_rec);
        epoch_records.push(val_rec);
    }

    Ok(TrainOutput {
        best_epoch,
        best_val_auc,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        epoch_records,
        final_params: params,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_train_sample(
    cfg: &RunConfig,
    vit_cfg: &crate::vit::VitConfig,
    params: &VitParams,
    sample: &PreparedSample,
    index: usize,
    epoch: usize,
    grid: &PatchGrid,
    cache: &OpamCache,
    selection: &[usize],
) -> Result<SampleRun, TrainError> {
    let alpha = cfg.train.alpha;
    let (volume, target) = if cfg.train.augment {
        let aug = draw_augment(cfg.seed, epoch as u64, index as u64);
        let volume = augment_volume(&sample.volume, &aug);
        let target = match (&sample.mask, alpha > 0.0) {
            (Some(mask), true) => {
                let flipped = if aug.flips.iter().any(|&f| f) {
                    augment_mask(mask, aug.flips)
                } else {
                    mask.clone()
                };
                Some(cache.get_or_build(
                    &flipped,
                    grid,
                    cfg.train.min_overlap_voxels,
                    cfg.train.target_mode,
                )?)
            }
            _ => None,
        };
        (volume, target)
    } else {
        (sample.volume.clone(), sample.target.clone())
    };
    let _ = vit_cfg;

    let mut fp = forward(params, &volume)?;
    let loss = sample_loss(
        &mut fp,
        sample.label,
        target.as_deref(),
        selection,
        alpha,
        cfg.train.target_mode,
        cfg.train.per_head,
    )?;
    let logit = fp.logit_value();
    fp.graph.backward(loss.l_final)?;
    let mut grad = vec![0.0f64; params.n_params()];
    fp.graph.accumulate_param_grads(&mut grad);
    Ok(SampleRun { grad, breakdown: loss.breakdown, logit })
}

fn evaluate_split_record(
    cfg: &RunConfig,
    pool: &rayon::ThreadPool,
    params: &VitParams,
    samples: &[PreparedSample],
    indices: &[usize],
    epoch: usize,
    selection: &[usize],
) -> Result<EpochRecord, TrainError> {
    struct ValRun {
        score: f64,
        l_cls: f64,
        l_ofa: Option<f64>,
        label: u8,
    }
    let alpha = cfg.train.alpha;
    let runs: Result<Vec<ValRun>, TrainError> = pool.install(|| {
        indices
            .par_iter()
            .map(|&idx| {
                let s = &samples[idx];
                let fp = forward(params, &s.volume)?;
                let logit = fp.logit_value();
                let l_ofa = if alpha > 0.0 {
                    match &s.target {
                        Some(t) => {
                            let stack = fp.attention_stack();
                            let mut total = 0.0;
                            for &layer in selection {
                                let mean = crate::vit::mean_head_attention(&stack, layer)?;
                                total += ofa_value_for_mode(
                                    &mean,
                                    stack.n_tokens,
                                    t,
                                    cfg.train.target_mode,
                                );
                            }
                            Some(total)
                        }
                        None => None,
                    }
                } else {
                    None
                };
                Ok(ValRun {
                    score: sigmoid(logit),
                    l_cls: crate::losses::classification_loss_value(logit, s.label),
                    l_ofa,
                    label: s.label,
                })
            })
            .collect()
    });
    let runs = runs?;
    let scores: Vec<f64> = runs.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = runs.iter().map(|r| r.label).collect();
    let auc = roc_auc(&ScoredSet::new(scores, labels)?)?;
    let l_cls = runs.iter().map(|r| r.l_cls).sum::<f64>() / runs.len().max(1) as f64;
    let ofa_vals: Vec<f64> = runs.iter().filter_map(|r| r.l_ofa).collect();
    let l_ofa_total = if ofa_vals.is_empty() {
        None
    } else {
        Some(ofa_vals.iter().sum::<f64>() / ofa_vals.len() as f64)
    };
    Ok(EpochRecord { epoch, split: "val".into(), l_cls, l_ofa_total, auc })
}

fn ofa_value_for_mode(attn: &[f64], n_tokens: usize, target: &OpamTarget, mode: TargetMode) -> f64 {
    match mode {
        TargetMode::ExcludeCls => crate::losses::ofa_loss_value(attn, n_tokens, target),
        TargetMode::IncludeCls => {
            let n = n_tokens * n_tokens;
            let sum: f64 = attn
                .iter()
                .zip(target.values())
                .map(|(a, t)| (t - a) * (t - a))
                .sum();
            sum / n as f64
        }
    }
}

fn save_state(
    params: &VitParams,
    adam: &AdamState,
    epoch: usize,
    best_val_auc: f64,
    best_epoch: usize,
    path: &Path,
) -> Result<(), TrainError> {
    let meta = serde_json::json!({
        "epoch": epoch,
        "adam_t": adam.t,
        "best_val_auc": best_val_auc,
        "best_epoch": best_epoch,
        "lr": adam.hyper.lr,
    });
    save_checkpoint(params, meta, &[("adam.m", &adam.m), ("adam.v", &adam.v)], path)?;
    Ok(())
}

#[derive(Default)]
struct RunningMeans {
    l_cls_sum: f64,
    l_ofa_sum: f64,
    ofa_count: usize,
    count: usize,
}

impl RunningMeans {
    fn push(&mut self, b: &LossBreakdown) {
        self.l_cls_sum += b.l_classification;
        self.count += 1;
        if !b.l_ofa_per_layer.is_empty() {
            self.l_ofa_sum += b.l_ofa_total;
            self.ofa_count += 1;
        }
    }

    fn mean_l_cls(&self) -> f64 {
        self.l_cls_sum / self.count.max(1) as f64
    }

    fn mean_l_ofa(&self) -> Option<f64> {
        (self.ofa_count > 0).then(|| self.l_ofa_sum / self.ofa_count as f64)
    }

    /// One losses.jsonl line: batch-mean breakdown at this step.
    fn step_line(&self, step: u64, runs: &[SampleRun], alpha: f64) -> String {
        let n = runs.len() as f64;
        let l_cls = runs.iter().map(|r| r.breakdown.l_classification).sum::<f64>() / n;
        let l_final = runs.iter().map(|r| r.breakdown.l_final).sum::<f64>() / n;
        let mut per_layer: std::collections::BTreeMap<String, f64> = Default::default();
        for run in runs {
            for (layer, v) in &run.breakdown.l_ofa_per_layer {
                *per_layer.entry(layer.to_string()).or_insert(0.0) += v / n;
            }
        }
        serde_json::json!({
            "step": step,
            "l_cls": l_cls,
            "l_ofa": per_layer,
            "alpha": alpha,
            "l_final": l_final,
        })
        .to_string()
    }
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// Gradient certification of the full training loss
// ---------------------------------------------------------------------------

/// Finite-difference check of the composite loss on a two-sample batch of
/// phantoms sized to the configured transformer. The batch value is the
/// mean of per-sample losses, exactly as the training loop reduces them.
pub fn full_loss_grad_check(
    cfg: &RunConfig,
) -> Result<crate::diff::check::GradCheckReport, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let mut vit_cfg = cfg.vit.clone();
    vit_cfg.seed = cfg.seed;
    let grid = vit_cfg.validate()?;
    let selection = cfg.train.ofa_layers.validate(vit_cfg.layers)?;
    let alpha = cfg.train.alpha;

    let phantom = crate::synth::PhantomConfig::for_dims(vit_cfg.input_dims, cfg.seed);
    phantom.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let cache = OpamCache::default();
    let mut batch = Vec::new();
    for (i, label) in [1u8, 0u8].into_iter().enumerate() {
        let s = crate::synth::generate_sample(&phantom, i as u64, label);
        let target = cache.get_or_build(
            &s.mask,
            &grid,
            cfg.train.min_overlap_voxels,
            cfg.train.target_mode,
        )?;
        batch.push((s.volume, label, target));
    }
    let params = init(&vit_cfg)?;

    let f = |p: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>), TrainError> {
        let mut trial = params.clone();
        trial.data.copy_from_slice(p);
        let mut value = 0.0;
        let mut grad = want_grad.then(|| vec![0.0f64; p.len()]);
        for (volume, label, target) in &batch {
            let mut fp = forward(&trial, volume)?;
            let loss = sample_loss(
                &mut fp,
                *label,
                Some(target),
                &selection,
                alpha,
                cfg.train.target_mode,
                cfg.train.per_head,
            )?;
            value += fp.graph.scalar(loss.l_final);
            if let Some(g) = grad.as_mut() {
                fp.graph.backward(loss.l_final)?;
                fp.graph.accumulate_param_grads(g);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        if let Some(g) = grad.as_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        Ok((value * inv, grad))
    };
    crate::diff::check::grad_check(
        f,
        &params.data,
        &crate::diff::check::GradCheckOpts { seed: cfg.seed, ..Default::default() },
    )
}

// ---------------------------------------------------------------------------
// Evaluation driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub val_auc: f64,
    /// "val" normally; "test" when threshold_on_test was requested.
    pub threshold_source: String,
    pub n_val: usize,
    pub n_test: usize,
}

/// Score the validation and test splits of the manifest with a trained
/// model, select the Youden threshold on validation, and report test
/// metrics at that unchanged threshold.
///
/// Only volumes are read; manifests with all-null masks evaluate fine.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    threshold_on_test: bool,
) -> Result<EvalOutput, TrainError> {
    let pool = build_pool(cfg.threads)?;
    let manifest = Manifest::load(Path::new(&cfg.data.manifest))?;
    let labels = manifest.labels();
    let splits = stratified_split(&labels, cfg.data.ratios, cfg.seed)?;
    let (params, _) = load_checkpoint(checkpoint)?;

    let val = score_indices(&pool, &params, &manifest, &splits.val)?;
    let test = score_indices(&pool, &params, &manifest, &splits.test)?;
    let val_set = ScoredSet::new(val, splits.val.iter().map(|&i| labels[i]).collect())?;
    let test_set = ScoredSet::new(test, splits.test.iter().map(|&i| labels[i]).collect())?;

    let (threshold, source) = if threshold_on_test {
        (youden_threshold(&test_set)?, "test")
    } else {
        (youden_threshold(&val_set)?, "val")
    };
    let report = prf1(&test_set, threshold)?;
    Ok(EvalOutput {
        report,
        val_auc: roc_auc(&val_set)?,
        threshold_source: source.into(),
        n_val: val_set.len(),
        n_test: test_set.len(),
    })
}

/// Mean CLS-rollout attention mass on organ patches over the given
/// manifest rows. This is an evaluation statistic, not an inference input:
/// it needs masks to know which patches are organ.
pub fn mean_organ_attention_mass(
    cfg: &RunConfig,
    params: &VitParams,
    manifest: &Manifest,
    indices: &[usize],
) -> Result<f64, TrainError> {
    let pool = build_pool(cfg.threads)?;
    let grid = params.config.grid();
    let masses: Result<Vec<f64>, TrainError> = pool.install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let entry = &manifest.entries[i];
                let mask_path = entry.mask.as_ref().ok_or(DataError::MissingMask { index: i })?;
                let volume = load_volume(&manifest.base_dir.join(&entry.volume))?;
                let mask = crate::vvol::load_mask(&manifest.base_dir.join(mask_path))?;
                let sets = crate::volgrid::organ_patches(&mask, &grid)?;
                let organ: Vec<usize> =
                    (0..grid.patch_count()).filter(|&p| !sets[p].is_empty()).collect();
                let fp = forward(params, &volume)?;
                let rollout = crate::rollout::attention_rollout(&fp.attention_stack())
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                Ok(crate::rollout::organ_attention_mass(&rollout, &organ))
            })
            .collect()
    });
    let masses = masses?;
    Ok(masses.iter().sum::<f64>() / masses.len().max(1) as f64)
}

/// Sigmoid scores for the given manifest rows. Reads volumes only — never
/// masks — so scoring works on mask-free manifests.
pub fn score_indices(
    pool: &rayon::ThreadPool,
    params: &VitParams,
    manifest: &Manifest,
    indices: &[usize],
) -> Result<Vec<f64>, TrainError> {
    pool.install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let vol = load_volume(&manifest.base_dir.join(&manifest.entries[i].volume))?;
                let fp = forward(params, &vol)?;
                Ok(sigmoid(fp.logit_value()))
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Sweep driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub alpha: f64,
    pub layers: String,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// (cell name, error) for cells that failed; the sweep continues past
    /// them.
    pub failures: Vec<(String, String)>,
    pub csv_path: PathBuf,
}

pub const SWEEP_CSV_HEADER: &str = "method,alpha,layers,auc,precision,recall,f1";

/// Train and evaluate one cell per (layer preset, alpha) pair and write
/// `results.csv` mirroring the preset x alpha ablation table structure.
pub fn sweep(cfg: &RunConfig, out_dir: &Path) -> Result<SweepOutput, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for preset in &cfg.sweep.presets {
        for &alpha in &cfg.sweep.alphas {
            let cell = format!("alpha{alpha}_{preset}");
            let mut cell_cfg = cfg.clone();
            cell_cfg.train.alpha = alpha;
            cell_cfg.train.ofa_layers = preset.clone();
            let cell_dir = out_dir.join(&cell);
            let outcome = train(&cell_cfg, &cell_dir)
                .and_then(|t| evaluate(&cell_cfg, &t.best_checkpoint, false));
            match outcome {
                Ok(eval) => rows.push(SweepRow {
                    method: if alpha == 0.0 { "baseline".into() } else { "ofa".into() },
                    alpha,
                    layers: preset.to_string(),
                    auc: eval.report.auc,
                    precision: eval.report.precision,
                    recall: eval.report.recall,
                    f1: eval.report.f1,
                }),
                Err(e) => failures.push((cell, e.to_string())),
            }
        }
    }
    let csv_path = out_dir.join("results.csv");
    write_sweep_csv(&rows, &csv_path)?;
    Ok(SweepOutput { rows, failures, csv_path })
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.method, r.alpha, r.layers, r.auc, r.precision, r.recall, r.f1
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Append one evaluation result to a sweep-schema CSV, creating it with a
/// header if needed.
pub fn append_eval_csv(
    path: &Path,
    method: &str,
    alpha: f64,
    layers: &str,
    report: &MetricsReport,
) -> Result<(), TrainError> {
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "{SWEEP_CSV_HEADER}")?;
    }
    writeln!(
        file,
        "{},{},{},{},{},{},{}",
        method, alpha, layers, report.auc, report.precision, report.recall, report.f1
    )?;
    Ok(())
}
