//! Acceptance suite: eight end-to-end criteria, one test each. Every test
//! prints a single `[PASS]/[FAIL] criterion N` line (visible under
//! `cargo test --test acceptance -- --nocapture`).
//!
//! Heavy criteria serialize on a mutex so their runtime budgets are
//! meaningful. Wall-clock budgets quoted for a 4-core machine are scaled
//! by the actually available parallelism.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ofa::data::{stratified_split, Manifest};
use ofa::diff::check::{grad_check, GradCheckOpts};
use ofa::diff::{DiffError, Graph, NodeId, Shape};
use ofa::losses::{ofa_loss_node, LayerPreset, TargetMode};
use ofa::metrics::{roc_auc, ScoredSet};
use ofa::opam::{build_opam, softmax_target, Opam};
use ofa::runconfig::RunConfig;
use ofa::synth::{generate, PhantomConfig};
use ofa::train::{evaluate, full_loss_grad_check, mean_organ_attention_mass, sweep, train};
use ofa::vit::load_checkpoint;
use ofa::volgrid::{partition, SegMask};

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    match LOCK.get_or_init(|| Mutex::new(())).lock() {
        Ok(g) => g,
        Err(poisoned) => poisoned.into_inner(),
    }
}

/// Budgets are stated for a 4-core CPU; scale when fewer cores exist.
fn budget(seconds_on_4_cores: f64) -> f64 {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    seconds_on_4_cores * (4.0 / cores as f64).max(1.0)
}

fn report(criterion: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {criterion}: {detail}");
    assert!(pass, "criterion {criterion}: {detail}");
}

// -------------------------------------------------------------------------
// Criterion 1: gradient correctness
// -------------------------------------------------------------------------

fn gradcheck_scalar_fn<F>(params: &[f64], build: F) -> f64
where
    F: Fn(&mut Graph, &[f64]) -> Result<NodeId, DiffError>,
{
    let f = |p: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>), DiffError> {
        let mut g = Graph::new();
        let root = build(&mut g, p)?;
        let grad = if want_grad {
            g.backward(root)?;
            let mut out = vec![0.0; p.len()];
            g.accumulate_param_grads(&mut out);
            Some(out)
        } else {
            None
        };
        Ok((g.scalar(root), grad))
    };
    grad_check(f, params, &GradCheckOpts::default()).unwrap().max_rel_err
}

#[test]
fn criterion_1_gradient_correctness() {
    let _guard = heavy_lock();
    let start = Instant::now();
    use rand::Rng;
    let mut rng = ofa::rng::stream(100, "acceptance-ops", &[]);
    let mut vals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };

    // Every op in isolation, double precision, eps 1e-5, rel err < 1e-6.
    let mut worst: (f64, &str) = (0.0, "none");
    let mut check = |name: &'static str, err: f64| {
        if err > worst.0 {
            worst = (err, name);
        }
    };
    let t22 = vals(4);
    let t23 = vals(6);
    let t33 = vals(9);

    check("matmul", gradcheck_scalar_fn(&vals(12), |g, p| {
        let a = g.param(Shape::new(2, 3), p, 0)?;
        let b = g.param(Shape::new(3, 2), p, 6)?;
        let y = g.matmul(a, b)?;
        let t = g.constant(Shape::new(2, 2), t22.clone())?;
        g.mse(y, t)
    }));
    check("add", gradcheck_scalar_fn(&vals(12), |g, p| {
        let a = g.param(Shape::new(2, 3), p, 0)?;
        let b = g.param(Shape::new(2, 3), p, 6)?;
        let y = g.add(a, b)?;
        g.mean(y)
    }));
    check("add_row", gradcheck_scalar_fn(&vals(9), |g, p| {
        let a = g.param(Shape::new(2, 3), p, 0)?;
        let b = g.param(Shape::new(1, 3), p, 6)?;
        let y = g.add_row(a, b)?;
        let t = g.constant(Shape::new(2, 3), t23.clone())?;
        g.mse(y, t)
    }));
    check("scale", gradcheck_scalar_fn(&vals(6), |g, p| {
        let a = g.param(Shape::new(2, 3), p, 0)?;
        let y = g.scale(a, -1.75)?;
        g.mean(y)
    }));
    check("row_softmax", gradcheck_scalar_fn(&vals(9), |g, p| {
        let a = g.param(Shape::new(3, 3), p, 0)?;
        let y = g.row_softmax(a)?;
        let t = g.constant(Shape::new(3, 3), t33.clone())?;
        g.mse(y, t)
    }));
    check("layer_norm", gradcheck_scalar_fn(&{
        let mut p = vals(16);
        for v in &mut p[8..12] {
            *v += 2.0; // gamma away from zero
        }
        p
    }, |g, p| {
        let x = g.param(Shape::new(2, 4), p, 0)?;
        let gamma = g.param(Shape::new(1, 4), p, 8)?;
        let beta = g.param(Shape::new(1, 4), p, 12)?;
        let y = g.layer_norm(x, gamma, beta, 1e-5)?;
        let t = g.constant(Shape::new(2, 4), vec![0.37; 8])?;
        g.mse(y, t)
    }));
    check("gelu", gradcheck_scalar_fn(&[-1.9, -0.6, -0.05, 0.3, 1.1, 2.4], |g, p| {
        let x = g.param(Shape::new(1, 6), p, 0)?;
        let y = g.gelu(x)?;
        g.mean(y)
    }));
    check("reshape+transpose", gradcheck_scalar_fn(&vals(6), |g, p| {
        let x = g.param(Shape::new(2, 3), p, 0)?;
        let r = g.reshape(x, Shape::new(3, 2))?;
        let t = g.transpose(r)?;
        let c = g.constant(Shape::new(2, 3), t23.clone())?;
        g.mse(t, c)
    }));
    check("concat", gradcheck_scalar_fn(&vals(10), |g, p| {
        let a = g.param(Shape::new(2, 2), p, 0)?;
        let b = g.param(Shape::new(3, 2), p, 4)?;
        let rows = g.concat_rows(&[a, b])?;
        let m1 = g.mean(rows)?;
        let e = g.param(Shape::new(2, 1), p, 8)?;
        let cols = g.concat_cols(&[a, e])?;
        let m2 = g.mean(cols)?;
        g.add(m1, m2)
    }));
    check("submatrix", gradcheck_scalar_fn(&vals(16), |g, p| {
        let x = g.param(Shape::new(4, 4), p, 0)?;
        let s = g.submatrix(x, 1, 0, 2, 3)?;
        g.mean(s)
    }));
    check("mean", gradcheck_scalar_fn(&vals(5), |g, p| {
        let x = g.param(Shape::new(1, 5), p, 0)?;
        g.mean(x)
    }));
    check("mse", gradcheck_scalar_fn(&vals(6), |g, p| {
        let a = g.param(Shape::new(1, 3), p, 0)?;
        let b = g.param(Shape::new(1, 3), p, 3)?;
        g.mse(a, b)
    }));
    check("bce_with_logits", gradcheck_scalar_fn(&vals(1), |g, p| {
        let x = g.param(Shape::new(1, 1), p, 0)?;
        g.bce_with_logits(x, 1.0)
    }));
    let ops_ok = worst.0 < 1e-6;

    // Full composite loss on the toy transformer: N = 27, L = 2, H = 2,
    // dim = 32, alpha = 1000, two-sample batch.
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.vit.embed_dim = 32;
    cfg.vit.layers = 2;
    cfg.vit.heads = 2;
    cfg.vit.mlp_ratio = 2.0;
    cfg.train.alpha = 1000.0;
    cfg.train.ofa_layers = LayerPreset::FirstMiddleLast;
    assert_eq!(cfg.vit.n_patches(), 27);
    let full = full_loss_grad_check(&cfg).unwrap();
    let full_ok = full.max_rel_err < 1e-4;

    let elapsed = start.elapsed().as_secs_f64();
    let time_ok = elapsed < 60.0;
    report(
        "1 (gradient correctness)",
        ops_ok && full_ok && time_ok,
        &format!(
            "worst op rel err {:.2e} ({}) < 1e-6: {}; full-loss rel err {:.2e} < 1e-4: {}; {:.1}s < 60s: {}",
            worst.0, worst.1, ops_ok, full.max_rel_err, full_ok, elapsed, time_ok
        ),
    );
}

// -------------------------------------------------------------------------
// Criterion 2: co-attention matrix oracle equivalence
// -------------------------------------------------------------------------

#[test]
fn criterion_2_opam_oracle_equivalence() {
    let start = Instant::now();
    use rand::Rng;
    let mut rng = ofa::rng::stream(200, "acceptance-opam", &[]);
    let mut worst_row_sum_err: f64 = 0.0;
    for round in 0..100 {
        let grid = partition([8, 12, 8], [4, 4, 4]).unwrap();
        assert!(grid.patch_count() <= 64);
        let n_vox = 8 * 12 * 8;
        let density = 0.02 + 0.4 * (round as f64 / 100.0);
        let labels: Vec<u8> = (0..n_vox)
            .map(|_| if rng.gen_bool(density) { rng.gen_range(1..4) } else { 0 })
            .collect();
        let mask = SegMask::new([8, 12, 8], labels, u8::MAX).unwrap();
        let opam = build_opam(&mask, &grid).unwrap();

        // Brute-force pairwise label-set intersection oracle.
        let n = grid.patch_count();
        let sets: Vec<std::collections::BTreeSet<u8>> = (0..n)
            .map(|p| {
                let [zr, yr, xr] = grid.patch_block(p);
                let mut set = std::collections::BTreeSet::new();
                for z in zr.clone() {
                    for y in yr.clone() {
                        for x in xr.clone() {
                            let l = mask.at(z, y, x);
                            if l != 0 {
                                set.insert(l);
                            }
                        }
                    }
                }
                set
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                let want = u8::from(sets[i].intersection(&sets[j]).next().is_some());
                assert_eq!(opam.at(i, j), want, "round {round} entry ({i},{j})");
            }
        }

        let target = softmax_target(&opam);
        for i in 0..n {
            let sum: f64 = (0..n).map(|j| target.at(i, j)).sum();
            worst_row_sum_err = worst_row_sum_err.max((sum - 1.0).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_row_sum_err < 1e-9 && elapsed < 10.0;
    report(
        "2 (co-attention oracle)",
        pass,
        &format!(
            "100/100 exact matches; worst target row-sum err {worst_row_sum_err:.2e} < 1e-9; {elapsed:.1}s < 10s"
        ),
    );
}

// -------------------------------------------------------------------------
// Criterion 3: supervision loss sanity
// -------------------------------------------------------------------------

#[test]
fn criterion_3_ofa_loss_sanity() {
    // Fixed point: patch block set exactly to the target.
    let opam = Opam::from_bits(3, vec![1, 1, 0, 1, 1, 0, 0, 0, 1]);
    let target = softmax_target(&opam);
    let mut g = Graph::new();
    let t = 4;
    let mut attn = vec![0.0; t * t];
    attn[0] = 1.0; // CLS row arbitrary
    for i in 0..3 {
        for j in 0..3 {
            attn[(i + 1) * t + (j + 1)] = target.at(i, j);
        }
    }
    let a = g.constant(Shape::new(t, t), attn).unwrap();
    let loss = ofa_loss_node(&mut g, a, &target, TargetMode::ExcludeCls).unwrap();
    let fixed_point = g.scalar(loss);

    // Hand-derived N = 2 case.
    let uniform = softmax_target(&Opam::from_bits(2, vec![0; 4]));
    #[rustfmt::skip]
    let attn = vec![
        0.1, 0.2,    0.7,
        0.0, 0.7311, 0.2689,
        0.0, 0.5,    0.5,
    ];
    let a = g.constant(Shape::new(3, 3), attn).unwrap();
    let loss = ofa_loss_node(&mut g, a, &uniform, TargetMode::ExcludeCls).unwrap();
    let n2 = g.scalar(loss);

    let pass = fixed_point < 1e-12 && (n2 - 0.026703).abs() < 1e-6;
    report(
        "3 (supervision loss sanity)",
        pass,
        &format!("fixed point {fixed_point:.2e} < 1e-12; hand case {n2:.6} = 0.026703 +/- 1e-6"),
    );
}

// -------------------------------------------------------------------------
// Criterion 4: metric oracles
// -------------------------------------------------------------------------

#[test]
fn criterion_4_metric_oracles() {
    use rand::Rng;
    let mut rng = ofa::rng::stream(400, "acceptance-metrics", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=200);
        // Coarse quantization injects ties.
        let levels = rng.gen_range(2..40);
        let scores: Vec<f64> =
            (0..n).map(|_| (rng.gen_range(0..levels) as f64) / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let fast = roc_auc(&set).unwrap();
        let mut pairs = 0.0;
        let mut credit = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        worst = worst.max((fast - credit / pairs).abs());
    }
    let auc_ok = worst < 1e-12;

    let f1_main = ofa::metrics::f1_from_pr(0.880, 0.867);
    let f1_main_ok = (f1_main - 0.872).abs() < 0.002;
    // Documented inconsistency: the standard formula gives ~0.866, not the
    // reported 0.852; asserted within the widened band only.
    let f1_known = ofa::metrics::f1_from_pr(0.921, 0.817);
    let f1_known_ok = (f1_known - 0.852).abs() <= 0.02 && (f1_known - 0.852).abs() > 0.002
        && (f1_known - 0.866).abs() < 1e-3;

    report(
        "4 (metric oracles)",
        auc_ok && f1_main_ok && f1_known_ok,
        &format!(
            "AUC vs brute force worst {worst:.2e} < 1e-12; F1(0.880,0.867) = {f1_main:.4} in 0.872 +/- 0.002; F1(0.921,0.817) = {f1_known:.4} (documented inconsistency vs reported 0.852, within +/- 0.02)"
        ),
    );
}

// -------------------------------------------------------------------------
// Criterion 5: end-to-end mechanism benefit
// -------------------------------------------------------------------------

/// The 200/30/50 split of the 280-sample default dataset.
const RATIOS: [f64; 3] = [5.0 / 7.0, 3.0 / 28.0, 5.0 / 28.0];

struct ArmResult {
    auc: f64,
    mass: f64,
}

fn run_arm(base: &Path, seed: u64, alpha: f64, threads: usize) -> ArmResult {
    let data_dir = base.join(format!("data_{seed}"));
    if !data_dir.join("manifest.json").exists() {
        let synth_cfg = PhantomConfig { seed, ..Default::default() };
        generate(&synth_cfg, &data_dir).unwrap();
    }
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.threads = threads;
    cfg.data.manifest = data_dir.join("manifest.json").to_string_lossy().into_owned();
    cfg.data.ratios = RATIOS;
    cfg.train.alpha = alpha;
    let out = base.join(format!("run_s{seed}_a{alpha}"));
    let t = train(&cfg, &out).unwrap();
    let e = evaluate(&cfg, &t.best_checkpoint, false).unwrap();
    let manifest = Manifest::load(Path::new(&cfg.data.manifest)).unwrap();
    let splits = stratified_split(&manifest.labels(), RATIOS, seed).unwrap();
    assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (200, 30, 50));
    let (params, _) = load_checkpoint(&t.best_checkpoint).unwrap();
    let mass = mean_organ_attention_mass(&cfg, &params, &manifest, &splits.test).unwrap();
    ArmResult { auc: e.report.auc, mass }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[test]
fn criterion_5_end_to_end_mechanism_benefit() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let threads = 4;
    let seeds: [u64; 5] = [0, 1, 2, 3, 4];

    // Select alpha on seed 0 by validation AUC (ties toward the larger,
    // more supervised alpha), then reuse it for the remaining seeds.
    let sweep_alphas = [10.0, 100.0, 1000.0];
    let mut best: Option<(f64, f64)> = None; // (val_auc, alpha)
    for &alpha in &sweep_alphas {
        let data_dir = tmp.path().join("data_0");
        if !data_dir.join("manifest.json").exists() {
            generate(&PhantomConfig { seed: 0, ..Default::default() }, &data_dir).unwrap();
        }
        let mut cfg = RunConfig::default();
        cfg.seed = 0;
        cfg.threads = threads;
        cfg.data.manifest = data_dir.join("manifest.json").to_string_lossy().into_owned();
        cfg.data.ratios = RATIOS;
        cfg.train.alpha = alpha;
        let out = tmp.path().join(format!("run_s0_a{alpha}"));
        let t = train(&cfg, &out).unwrap();
        let replace = match best {
            None => true,
            Some((auc, _)) => t.best_val_auc >= auc,
        };
        if replace {
            best = Some((t.best_val_auc, alpha));
        }
    }
    let (sel_val_auc, alpha_star) = best.unwrap();
    println!("criterion 5: selected alpha = {alpha_star} (seed-0 val AUC {sel_val_auc:.3})");

    let mut ofa_auc = Vec::new();
    let mut ofa_mass = Vec::new();
    let mut base_auc = Vec::new();
    let mut base_mass = Vec::new();
    for &seed in &seeds {
        let ofa = run_arm(tmp.path(), seed, alpha_star, threads);
        let base = run_arm(tmp.path(), seed, 0.0, threads);
        println!(
            "criterion 5: seed {seed}: ofa auc {:.3} mass {:.3} | baseline auc {:.3} mass {:.3}",
            ofa.auc, ofa.mass, base.auc, base.mass
        );
        ofa_auc.push(ofa.auc);
        ofa_mass.push(ofa.mass);
        base_auc.push(base.auc);
        base_mass.push(base.mass);
    }
    let med_ofa_mass = median(&mut ofa_mass);
    let med_base_mass = median(&mut base_mass);
    let med_ofa_auc = median(&mut ofa_auc);
    let med_base_auc = median(&mut base_auc);
    let ratio = med_ofa_mass / med_base_mass;
    let mass_ok = ratio >= 1.5;
    let auc_ok = med_ofa_auc >= med_base_auc;
    let elapsed = start.elapsed().as_secs_f64();
    let time_ok = elapsed < budget(900.0);
    report(
        "5 (end-to-end mechanism benefit)",
        mass_ok && auc_ok && time_ok,
        &format!(
            "median mass ofa {med_ofa_mass:.3} vs baseline {med_base_mass:.3} (ratio {ratio:.2}, need >= 1.5): {mass_ok}; median AUC ofa {med_ofa_auc:.3} >= baseline {med_base_auc:.3}: {auc_ok}; {elapsed:.0}s within budget: {time_ok}"
        ),
    );
}

// -------------------------------------------------------------------------
// Criterion 6: ablation machinery
// -------------------------------------------------------------------------

#[test]
fn criterion_6_ablation_machinery() {
    let _guard = heavy_lock();
    let start = Instant::now();

    // Preset resolution for a 12-layer model.
    let p_first = LayerPreset::First.resolve(12);
    let p_fl = LayerPreset::FirstLast.resolve(12);
    let p_fml = LayerPreset::FirstMiddleLast.resolve(12);
    let presets_ok = p_first == vec![0] && p_fl == vec![0, 11] && p_fml == vec![0, 5, 11];

    // Reduced one-seed grid on a small synthetic task: 3 presets x 3 alphas.
    let tmp = tempfile::tempdir().unwrap();
    let synth_cfg = PhantomConfig { count: 60, seed: 6, ..Default::default() };
    generate(&synth_cfg, &tmp.path().join("data")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 6;
    cfg.threads = 4;
    cfg.data.manifest = tmp.path().join("data/manifest.json").to_string_lossy().into_owned();
    cfg.data.ratios = [0.6, 0.2, 0.2];
    cfg.train.epochs = 4;
    cfg.sweep.alphas = vec![900.0, 1000.0, 1100.0];
    cfg.sweep.presets = vec![
        LayerPreset::First,
        LayerPreset::FirstLast,
        LayerPreset::FirstMiddleLast,
    ];
    let out = tmp.path().join("sweep");
    let result = sweep(&cfg, &out).unwrap();
    let rows_ok = result.rows.len() == 9 && result.failures.is_empty();

    let csv = std::fs::read_to_string(&result.csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let csv_ok = lines.len() == 10
        && lines[0] == "method,alpha,layers,auc,precision,recall,f1"
        && lines[1..].iter().all(|l| l.split(',').count() == 7);

    let elapsed = start.elapsed().as_secs_f64();
    let time_ok = elapsed < budget(1800.0);
    report(
        "6 (ablation machinery)",
        presets_ok && rows_ok && csv_ok && time_ok,
        &format!(
            "L=12 presets {{0}},{{0,11}},{{0,5,11}}: {presets_ok}; 9-row CSV: {rows_ok}/{csv_ok}; {elapsed:.0}s within budget: {time_ok}"
        ),
    );
}

// -------------------------------------------------------------------------
// Criterion 7: inference independence from segmentation
// -------------------------------------------------------------------------

#[test]
fn criterion_7_inference_without_masks() {
    let _guard = heavy_lock();
    let tmp = tempfile::tempdir().unwrap();
    let synth_cfg = PhantomConfig { count: 40, seed: 7, ..Default::default() };
    let manifest = generate(&synth_cfg, &tmp.path().join("data")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.threads = 4;
    cfg.data.manifest = tmp.path().join("data/manifest.json").to_string_lossy().into_owned();
    cfg.data.ratios = [0.6, 0.2, 0.2];
    cfg.train.epochs = 2;
    let out = tmp.path().join("run");
    let t = train(&cfg, &out).unwrap();

    // Null every mask field, then drive the real CLI binary.
    let bare = manifest.without_masks();
    let bare_path = tmp.path().join("bare_manifest.json");
    bare.save(&bare_path).unwrap();
    let bare_text = std::fs::read_to_string(&bare_path).unwrap();
    assert!(bare_text.contains("\"mask\": null"));

    let exe = env!("CARGO_BIN_EXE_ofa");
    let eval_out = tmp.path().join("eval");
    let status = std::process::Command::new(exe)
        .args([
            "eval",
            "--out",
            eval_out.to_str().unwrap(),
            "--seed",
            "7",
            "--set",
            &format!("data.manifest={}", bare_path.display()),
            "--set",
            "data.ratios=[0.6,0.2,0.2]",
            "--set",
            &format!("eval.checkpoint={}", t.best_checkpoint.display()),
        ])
        .output()
        .unwrap();
    let eval_ok = status.status.success() && eval_out.join("metrics.json").exists();

    let rollout_out = tmp.path().join("rollout");
    let volume = tmp.path().join("data").join(&manifest.entries[0].volume);
    let status = std::process::Command::new(exe)
        .args([
            "rollout",
            "--out",
            rollout_out.to_str().unwrap(),
            "--set",
            &format!("rollout.checkpoint={}", t.best_checkpoint.display()),
            "--set",
            &format!("rollout.volume={}", volume.display()),
            "--set",
            "rollout.slices=[12]",
        ])
        .output()
        .unwrap();
    let rollout_json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(rollout_out.join("rollout.json")).unwrap_or_default(),
    )
    .unwrap_or(serde_json::Value::Null);
    let rollout_ok = status.status.success()
        && rollout_out.join("heatmap.vvol").exists()
        && rollout_out.join("heatmap_z012.pgm").exists()
        && rollout_json["organ_attention_mass"].is_null();

    report(
        "7 (inference without segmentation)",
        eval_ok && rollout_ok,
        &format!("eval on all-null masks: {eval_ok}; rollout without mask: {rollout_ok}"),
    );
}

// -------------------------------------------------------------------------
// Criterion 8: determinism
// -------------------------------------------------------------------------

#[test]
fn criterion_8_determinism() {
    let _guard = heavy_lock();
    let tmp = tempfile::tempdir().unwrap();
    let synth_cfg = PhantomConfig { count: 40, seed: 8, ..Default::default() };
    generate(&synth_cfg, &tmp.path().join("data")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 8;
    cfg.threads = 1;
    cfg.data.manifest = tmp.path().join("data/manifest.json").to_string_lossy().into_owned();
    cfg.data.ratios = [0.6, 0.2, 0.2];
    cfg.train.epochs = 3;
    cfg.train.alpha = 100.0;

    let out1 = tmp.path().join("t1a");
    let out2 = tmp.path().join("t1b");
    train(&cfg, &out1).unwrap();
    train(&cfg, &out2).unwrap();
    let same = |name: &str| -> bool {
        std::fs::read(out1.join(name)).unwrap() == std::fs::read(out2.join(name)).unwrap()
    };
    let bitwise_ok =
        same("best.ckpt") && same("last.ckpt") && same("epochs.jsonl") && same("losses.jsonl");

    // Four worker threads must agree numerically (here: to the last bit,
    // since reduction order is fixed) with the serial run.
    let mut cfg4 = cfg.clone();
    cfg4.threads = 4;
    let out4 = tmp.path().join("t4");
    train(&cfg4, &out4).unwrap();
    let log1 = std::fs::read_to_string(out1.join("epochs.jsonl")).unwrap();
    let log4 = std::fs::read_to_string(out4.join("epochs.jsonl")).unwrap();
    let mut max_diff: f64 = 0.0;
    for (l1, l4) in log1.lines().zip(log4.lines()) {
        let r1: serde_json::Value = serde_json::from_str(l1).unwrap();
        let r4: serde_json::Value = serde_json::from_str(l4).unwrap();
        for key in ["l_cls", "l_ofa_total", "auc"] {
            let (a, b) = (r1[key].as_f64(), r4[key].as_f64());
            if let (Some(a), Some(b)) = (a, b) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
    }
    let threads_ok = max_diff <= 1e-12 && log1.lines().count() == log4.lines().count();

    report(
        "8 (determinism)",
        bitwise_ok && threads_ok,
        &format!(
            "two serial runs bitwise identical (checkpoints + logs): {bitwise_ok}; 4-thread vs serial log max diff {max_diff:.2e} <= 1e-12: {threads_ok}"
        ),
    );
}
