//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use mtl_cli::ablation::run_ablation_on;
use mtl_cli::config::ExperimentConfig;
use mtl_core::autodiff::Graph;
use mtl_core::data::{
    balanced_augment, build_dataset, generate_synthetic_dataset, load_dataset, save_dataset, AugmentOp, DataConfig,
    Dataset, LabeledImage, Provenance, Split, CHANNELS,
};
use mtl_core::gradsuite::{run_suite, SuiteOptions, DEFAULT_PROBE, DEFAULT_TOLERANCE};
use mtl_core::layers::{component_rng, BackboneSpec, NormLayer};
use mtl_core::metrics::{accuracy, build_report, error_percentage, mae, mccr, EvalRecord, Subset};
use mtl_core::multitask::*;
use mtl_core::{Error, Tensor};
use rand::Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

type Outcome = std::result::Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: mtl_core::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let opts = SuiteOptions::default();
    ensure(opts.probe == 1e-4 && DEFAULT_PROBE == 1e-4, || "probe is not 1e-4".into())?;
    let start = Instant::now();
    let reports = core(run_suite(&opts))?;
    let elapsed = start.elapsed();
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    for required in [
        "add", "sub", "mul", "div", "relu", "exp", "log", "matmul", "conv2d", "maxpool2d", "log_softmax",
        "layer_norm", "batch_norm_training", "batch_norm_inference", "cross_entropy_loss", "l1_loss",
        "sharing_penalty", "cdfa_head", "joint_objective",
    ] {
        ensure(names.contains(&required), || format!("component {required} not covered"))?;
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed(DEFAULT_TOLERANCE))
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || format!("over tolerance: {}", failed.join(", ")))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "{} components, worst {} at {:.2e}, {:.1}s",
        reports.len(),
        worst.name,
        worst.max_rel_error,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn normalization_invariants() -> Outcome {
    // A vanishing ε isolates the normalization itself from its regularizer.
    const EPS: f64 = 1e-12;
    let mut rng = component_rng(2, "acceptance.norm");
    let (mut worst_mean, mut worst_var) = (0f64, 0f64);
    let mut track = |mean: f64, var: f64| {
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    };
    for _ in 0..200 {
        let m = rng.gen_range(1..8);
        let h = rng.gen_range(2..48);
        let scale = rng.gen_range(0.01..100.0);
        let shift = rng.gen_range(-50.0..50.0);
        let ln = core(NormLayer::layer("ln", h, EPS))?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[m, h], shift - scale, shift + scale, &mut rng));
        let out = core(ln.layer_norm_forward(&mut g, x))?;
        let t = g.value(out.normalized);
        for i in 0..m {
            let (mean, var) = moments(t.row(i).iter().copied());
            track(mean, var);
        }
    }
    for _ in 0..200 {
        let m = rng.gen_range(2..24);
        let h = rng.gen_range(1..24);
        let scale = rng.gen_range(0.01..100.0);
        let shift = rng.gen_range(-50.0..50.0);
        let mut bn = core(NormLayer::batch("bn", h, EPS, 0.1))?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[m, h], shift - scale, shift + scale, &mut rng));
        let out = core(bn.batch_norm_forward(&mut g, x, true))?;
        let t = g.value(out.normalized);
        for j in 0..h {
            let (mean, var) = moments((0..m).map(|i| t.row(i)[j]));
            track(mean, var);
        }
    }
    ensure(worst_mean <= 1e-9, || format!("|mean| reached {worst_mean:.2e}"))?;
    ensure(worst_var <= 1e-6, || format!("|var - 1| reached {worst_var:.2e}"))?;

    // Inference: every sample's output is independent of its batch.
    let mut bn = core(NormLayer::batch("bn", 6, 1e-5, 0.1))?;
    for _ in 0..10 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[9, 6], -3.0, 5.0, &mut rng));
        core(bn.batch_norm_forward(&mut g, x, true))?;
    }
    let infer = |bn: &mut NormLayer, rows: Vec<f64>| -> std::result::Result<Vec<u64>, String> {
        let n = rows.len() / 6;
        let mut g = Graph::no_grad();
        let x = g.constant(core(Tensor::new(vec![n, 6], rows))?);
        let y = core(bn.batch_norm_forward(&mut g, x, false))?.output;
        Ok(g.value(y).data().iter().map(|v| v.to_bits()).collect())
    };
    for _ in 0..200 {
        let m = rng.gen_range(2..17);
        let batch = Tensor::uniform(&[m, 6], -10.0, 10.0, &mut rng);
        let full = infer(&mut bn, batch.data().to_vec())?;
        let cut = rng.gen_range(1..m);
        let mut split = infer(&mut bn, batch.data()[..cut * 6].to_vec())?;
        split.extend(infer(&mut bn, batch.data()[cut * 6..].to_vec())?);
        ensure(full == split, || format!("batch of {m} split at {cut} changed outputs"))?;
        for i in 0..m {
            let one = infer(&mut bn, batch.row(i).to_vec())?;
            ensure(one == full[i * 6..(i + 1) * 6], || format!("row {i} of {m} differs alone"))?;
        }
    }

    // The same holds through a whole joint model.
    let spec = ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 3, BackboneSpec::default(), 5);
    let data = core(generate_synthetic_dataset(3, 4, 32, 5))?;
    let mut trainer = core(Trainer::new(core(TwinModel::new(spec))?, TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() }))?;
    core(trainer.fit(&data))?;
    let items: Vec<&LabeledImage> = data.items.iter().collect();
    let all = core(trainer.model.predict(&core(batch_tensor(&items))?))?;
    for (i, it) in items.iter().enumerate() {
        let one = core(trainer.model.predict(&core(batch_tensor(&[it]))?))?;
        let same = one.classes.as_ref().unwrap()[0] == all.classes.as_ref().unwrap()[i]
            && one.portions.as_ref().unwrap()[0].to_bits() == all.portions.as_ref().unwrap()[i].to_bits();
        ensure(same, || format!("model prediction {i} depends on its batch"))?;
    }
    Ok(format!(
        "worst |mean| {worst_mean:.1e}, worst |var-1| {worst_var:.1e} (eps {EPS:e}); inference bitwise batch-invariant"
    ))
}

// ---------------------------------------------------------------- 3

fn penalty_convergence() -> Outcome {
    let data = core(build_dataset(&DataConfig::default()))?;
    let train_set = data.subset(Split::Train);
    let spec = ModelSpec::new(ExperimentMode::Sps, data.n_classes(), BackboneSpec::default(), 0);
    let model = core(TwinModel::new(spec))?;
    let cfg = TrainConfig {
        epochs: 50,
        loss_weights: LossWeights::new(0.0, 0.0, 1.0),
        ..TrainConfig::default()
    };
    let initial = core(soft_sharing_penalty_value(
        model.backbone_c.as_ref().unwrap(),
        model.backbone_r.as_ref().unwrap(),
        cfg.shared_layer_fraction,
    ))?;
    let start = Instant::now();
    let (model, logs) = core(train(model, &train_set, &cfg))?;
    let last = core(soft_sharing_penalty_value(
        model.backbone_c.as_ref().unwrap(),
        model.backbone_r.as_ref().unwrap(),
        cfg.shared_layer_fraction,
    ))?;
    let ratio = initial / last.max(f64::MIN_POSITIVE);
    ensure(logs.len() == 50, || format!("{} epochs logged", logs.len()))?;
    ensure(ratio >= 1000.0, || format!("L_ps {initial:.3e} -> {last:.3e}, only {ratio:.1}x"))?;
    let first = logs.iter().find(|l| initial / l.l_ps >= 1000.0).map_or(0, |l| l.epoch);
    Ok(format!(
        "L_ps {initial:.3e} -> {last:.3e} ({ratio:.1e}x); 1000x by epoch {first}; {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn rec(p: usize, t: usize, wp: f64, wt: f64) -> EvalRecord {
    EvalRecord {
        predicted_class: p,
        true_class: t,
        predicted_portion: wp,
        true_portion: wt,
    }
}

fn metric_oracles() -> Outcome {
    // Errors 10, 30, 0, 24 on the four correct records and 36 on the wrong
    // one; truths sum to 400.
    let fixture = [
        rec(0, 0, 110.0, 100.0),
        rec(1, 1, 50.0, 80.0),
        rec(2, 2, 70.0, 70.0),
        rec(3, 3, 96.0, 120.0),
        rec(4, 0, 66.0, 30.0),
    ];
    let checks = [
        ("accuracy", core(accuracy(&fixture))?, 0.8),
        ("MAE", core(mae(&fixture, Subset::All))?, 20.0),
        ("MAE-Correct", core(mae(&fixture, Subset::CorrectOnly))?, 16.0),
        ("MCCR(C=1)", core(mccr(&fixture, 1.0))?, 4.0),
        ("MCCR(C=2)", core(mccr(&fixture, 2.0))?, 8.0),
        ("EP", core(error_percentage(&fixture))?, 25.0),
    ];
    for (name, got, want) in checks {
        let (got, want): (f64, f64) = (got, want);
        ensure(got.to_bits() == want.to_bits(), || format!("{name}: {got} != {want}"))?;
    }
    let report = core(build_report(&fixture, 1.0))?;
    ensure(
        report.accuracy == Some(0.8) && report.mccr == Some(4.0) && report.n_correct == 4,
        || format!("report disagrees: {report:?}"),
    )?;
    ensure(matches!(mccr(&[rec(1, 0, 1.0, 1.0)], 1.0), Err(Error::EmptyInput(_))), || {
        "MCCR without correct records must be an error".into()
    })?;

    let mut rng = component_rng(4, "acceptance.metrics");
    for set in 0..100 {
        let n = rng.gen_range(1..60);
        let mut records: Vec<EvalRecord> = (0..n)
            .map(|_| {
                let t = rng.gen_range(0..5);
                let p = if rng.gen_bool(0.6) { t } else { rng.gen_range(0..5) };
                rec(p, t, rng.gen_range(0.0..600.0), rng.gen_range(1.0..600.0))
            })
            .collect();
        records[0].predicted_class = records[0].true_class;
        let n_correct = records.iter().filter(|r| r.is_correct()).count();
        let lhs = core(mccr(&records, 1.0))?;
        let rhs = core(mae(&records, Subset::CorrectOnly))? / n_correct as f64;
        ensure(lhs.to_bits() == rhs.to_bits(), || format!("set {set}: MCCR {lhs} vs {rhs}"))?;

        let oracle_acc = n_correct as f64 / n as f64;
        let oracle_mae = records
            .iter()
            .fold(0.0, |s, r| s + (r.predicted_portion - r.true_portion).abs())
            / n as f64;
        ensure(core(accuracy(&records))?.to_bits() == oracle_acc.to_bits(), || format!("set {set}: accuracy"))?;
        ensure(core(mae(&records, Subset::All))?.to_bits() == oracle_mae.to_bits(), || {
            format!("set {set}: MAE")
        })?;
    }
    Ok("fixture values exact; MCCR(C=1) == MAE-Correct / n_correct bitwise on 100 random sets".into())
}

// ---------------------------------------------------------------- 5

fn directional_ablation() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml");
    let cfg = ExperimentConfig::load(&root).map_err(|e| e.to_string())?;
    let cfg = cfg.resolve().map_err(|e| e.to_string())?;
    let g = &cfg.data.generator;
    ensure(
        (g.n_classes, g.per_class, g.image_size, cfg.ablation.seeds.len()) == (21, 100, 32, 3),
        || "acceptance config must use 21 x 100 images of 32x32 and 3 seeds".into(),
    )?;
    let start = Instant::now();
    let data = core(build_dataset(g))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome = run_ablation_on(&cfg, &data, Path::new("<memory>"), dir.path(), |r| {
        if let Some(e) = &r.error {
            println!("    {} seed {} failed: {e}", r.mode, r.seed);
        }
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for line in outcome.table.to_text().lines() {
        println!("    {line}");
    }
    let failed = outcome.table.failed();
    ensure(failed.is_empty(), || format!("{} rows failed", failed.len()))?;
    let row = |m| outcome.table.row(m).ok_or_else(|| format!("no row for {m}"));
    let acc = |m| row(m).and_then(|r| r.accuracy.ok_or_else(|| format!("{m} has no accuracy")));
    let mae = |m| row(m).and_then(|r| r.mae.ok_or_else(|| format!("{m} has no MAE")));
    let (hps, sps) = (acc(ExperimentMode::Hps)?, acc(ExperimentMode::Sps)?);
    let (full_mae, cdfa_mae) = (mae(ExperimentMode::SpsCdfaLnBn)?, mae(ExperimentMode::SpsCdfa)?);
    let (full_acc, cls_acc) = (acc(ExperimentMode::SpsCdfaLnBn)?, acc(ExperimentMode::ClassificationOnly)?);
    let a = hps <= sps - 5.0;
    let b = full_mae <= cdfa_mae;
    let c = full_acc >= cls_acc - 2.0;
    let within = elapsed <= Duration::from_secs(15 * 60);
    let summary = format!(
        "(a) HPS {hps:.2} vs SPS {sps:.2} [{}]; (b) MAE LN+BN {full_mae:.2} vs CDFA {cdfa_mae:.2} [{}]; \
         (c) acc LN+BN {full_acc:.2} vs cls-only {cls_acc:.2} [{}]; {:.0}s [{}]",
        verdict(a),
        verdict(b),
        verdict(c),
        elapsed.as_secs_f64(),
        verdict(within)
    );
    if a && b && c && within {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------- 6

fn uneven(counts: &[usize], seed: u64) -> std::result::Result<Dataset, String> {
    let per = *counts.iter().max().unwrap();
    let mut ds = core(generate_synthetic_dataset(counts.len(), per, 12, seed))?;
    let mut kept = vec![0; counts.len()];
    ds.items.retain(|it| {
        kept[it.y] += 1;
        kept[it.y] <= counts[it.y]
    });
    Ok(ds)
}

fn augmentation_contract() -> Outcome {
    let mut rng = component_rng(6, "acceptance.augment");
    let (mut balanced, mut refused) = (0, 0);
    for _ in 0..40 {
        let counts: Vec<usize> = (0..rng.gen_range(2..5)).map(|_| rng.gen_range(1..9)).collect();
        let ds = uneven(&counts, rng.gen())?;
        let biggest = *counts.iter().max().unwrap();
        let ceiling = counts.iter().map(|c| c * 6).min().unwrap();
        let target = rng.gen_range(biggest..biggest + 2 * ceiling);
        match balanced_augment(&ds, target, rng.gen()) {
            Ok(out) => {
                for (k, &n) in out.class_counts().iter().enumerate() {
                    ensure(n.abs_diff(target) <= 1, || format!("class {k}: {n} for target {target}"))?;
                }
                for it in &out.items {
                    if let Provenance::Augmented { source, op } = it.provenance {
                        let src = ds.items.iter().find(|s| s.id == source).ok_or("dangling source")?;
                        ensure(it.y == src.y && it.z.to_bits() == src.z.to_bits(), || {
                            format!("item {} changed (y, z)", it.id)
                        })?;
                        let (px, h, w) = op.apply(&src.pixels, src.height, src.width);
                        ensure(px == it.pixels && (h, w) == (it.height, it.width), || {
                            format!("item {} pixels are not {op:?} of its source", it.id)
                        })?;
                    }
                }
                balanced += 1;
            }
            Err(Error::UnreachableTarget { .. }) => {
                let reachable = counts.iter().all(|&c| target <= c * 6);
                ensure(!reachable, || format!("target {target} reachable for {counts:?} but refused"))?;
                refused += 1;
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    ensure(balanced > 0 && refused > 0, || format!("{balanced} balanced, {refused} refused"))?;
    let ds = uneven(&[2, 5], 1)?;
    ensure(matches!(balanced_augment(&ds, 15, 0), Err(Error::UnreachableTarget { .. })), || {
        "2 originals cannot reach 15".into()
    })?;

    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let px: Vec<f32> = (0..h * w * CHANNELS).map(|_| rng.gen()).collect();
        let (a, ah, aw) = AugmentOp::Rot270.apply(&px, h, w);
        let (b, bh, bw) = AugmentOp::Rot90.apply(&a, ah, aw);
        ensure(b == px && (bh, bw) == (h, w), || format!("rot90 . rot270 not identity on {h}x{w}"))?;
        let (a, ah, aw) = AugmentOp::Rot90.apply(&px, h, w);
        let (b, _, _) = AugmentOp::Rot270.apply(&a, ah, aw);
        ensure(b == px, || format!("rot270 . rot90 not identity on {h}x{w}"))?;
        let (a, ah, aw) = AugmentOp::FlipX.apply(&px, h, w);
        let (b, _, _) = AugmentOp::FlipX.apply(&a, ah, aw);
        ensure(b == px, || format!("flipX . flipX not identity on {h}x{w}"))?;
    }
    Ok(format!(
        "{balanced} random targets balanced, {refused} refused as unreachable; identities exact on 50 random images"
    ))
}

// ---------------------------------------------------------------- 7

fn read_dir_bytes(dir: &Path) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), bytes));
    }
    files.sort();
    Ok(files)
}

fn determinism_and_persistence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = DataConfig {
        n_classes: 4,
        per_class: 12,
        augment_target: Some(14),
        ..DataConfig::default()
    };
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    core(save_dataset(&core(build_dataset(&cfg))?, &a))?;
    core(save_dataset(&core(build_dataset(&cfg))?, &b))?;
    ensure(read_dir_bytes(&a)? == read_dir_bytes(&b)?, || "same recipe, different dataset files".into())?;
    let loaded = core(load_dataset(&a))?;
    ensure(loaded == core(build_dataset(&cfg))?, || "loaded dataset differs from generated".into())?;
    core(save_dataset(&loaded, &c))?;
    ensure(read_dir_bytes(&a)? == read_dir_bytes(&c)?, || "dataset round trip not bitwise".into())?;

    let train_set = loaded.subset(Split::Train);
    let run = || -> std::result::Result<(Vec<String>, Vec<u8>), String> {
        let spec = ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 4, BackboneSpec::default(), 3);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let (model, logs) = core(train(core(TwinModel::new(spec))?, &train_set, &tc))?;
        let trace = logs.iter().map(|l| serde_json::to_string(l).unwrap()).collect();
        Ok((trace, core(write_checkpoint(&model))?))
    };
    let (t1, c1) = run()?;
    let (t2, c2) = run()?;
    ensure(t1 == t2, || "loss traces differ".into())?;
    ensure(c1 == c2, || "checkpoints differ".into())?;
    let back = core(read_checkpoint(&c1))?;
    ensure(core(write_checkpoint(&back))? == c1, || "checkpoint round trip not bitwise".into())?;
    let path = tmp.path().join("model.ckpt");
    core(save_checkpoint(&back, &path))?;
    ensure(std::fs::read(&path).map_err(|e| e.to_string())? == c1, || "checkpoint file differs".into())?;
    let reloaded = core(load_checkpoint(&path))?;
    let imgs: Vec<&LabeledImage> = loaded.items.iter().take(6).collect();
    let x = core(batch_tensor(&imgs))?;
    let (p1, p2) = (core(back.predict(&x))?, core(reloaded.predict(&x))?);
    ensure(p1 == p2, || "reloaded model predicts differently".into())?;
    Ok(format!(
        "dataset files, {}-epoch loss trace and {}-byte checkpoint reproduce and round-trip bitwise",
        t1.len(),
        c1.len()
    ))
}

// ---------------------------------------------------------------- 8

fn decoupling() -> Outcome {
    let data = core(generate_synthetic_dataset(3, 8, 32, 11))?;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        loss_weights: LossWeights::new(1.0, 1.0, 0.0),
        seed: 4,
        ..TrainConfig::default()
    };
    let fit = |mode| -> std::result::Result<(TwinModel, Vec<EpochLog>), String> {
        let spec = ModelSpec::new(mode, 3, BackboneSpec::default(), 9);
        core(train(core(TwinModel::new(spec))?, &data, &cfg))
    };
    let (joint, logs) = fit(ExperimentMode::Sps)?;
    ensure(logs[0].steps == 3, || format!("{} steps instead of 3", logs[0].steps))?;
    let (cls, _) = fit(ExperimentMode::ClassificationOnly)?;
    let (reg, _) = fit(ExperimentMode::PortionOnly)?;
    let mut worst = 0f64;
    let mut compared = 0;
    for (other, prefixes) in [(&cls, ["backbone_c", "head_c"]), (&reg, ["backbone_r", "head_r"])] {
        for prefix in prefixes {
            let mine: Vec<_> = joint.params().into_iter().filter(|p| p.name.starts_with(prefix)).collect();
            let theirs: Vec<_> = other.params().into_iter().filter(|p| p.name.starts_with(prefix)).collect();
            ensure(!mine.is_empty() && mine.len() == theirs.len(), || format!("{prefix} layout differs"))?;
            for (a, b) in mine.iter().zip(&theirs) {
                ensure(a.name == b.name, || format!("{} vs {}", a.name, b.name))?;
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    worst = worst.max((x - y).abs());
                    compared += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max parameter difference {worst:.2e}"))?;
    Ok(format!("{compared} parameters after 3 steps, max difference {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("gradient suite", gradient_suite),
        ("normalization invariants", normalization_invariants),
        ("sharing-penalty convergence", penalty_convergence),
        ("metric oracles", metric_oracles),
        ("directional ablation", directional_ablation),
        ("augmentation contract", augmentation_contract),
        ("determinism and persistence", determinism_and_persistence),
        ("zero-penalty decoupling", decoupling),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
