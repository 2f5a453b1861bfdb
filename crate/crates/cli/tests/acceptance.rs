//! Acceptance criteria, one status line each.
//!
//! Lines go straight to the stderr handle so they appear even when the test
//! passes. Run alone with `cargo test -p dmrn-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::dmrn_check::check_dmrn;
use common::gradcheck::{check, project, random, Report};
use dmrn::backbone::{BackboneConfig, ModelParams};
use dmrn::classifier::embed;
use dmrn::contrastive::{pair_loss, LossConfig};
use dmrn::eval::{compute_metrics, make_folds, ConfusionMatrix, Ratio};
use dmrn::pairing::{exhaustive_count, sample_pairs, PairMode, SamplerConfig};
use dmrn::rpu::{rpu_forward, RpuParams, RpuVars};
use dmrn::synth::{TABLE1_SLICES, TABLE1_STUDIES};
use dmrn::tape::{BnMode, Tape, Var};
use dmrn::trainer::pair_objective;
use dmrn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn dmrn(args: &[&str]) -> Result<std::path::PathBuf, String> {
    dmrn_cli::run(std::iter::once("dmrn").chain(args.iter().copied())).map_err(|f| f.message)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn per_op_reports() -> Vec<(&'static str, Report)> {
    const TOL: f64 = 1e-4;
    let mut out = Vec::new();
    let conv = [random(&[2, 3, 6, 5], 1), random(&[4, 3, 3, 3], 2)];
    out.push(("conv2d", check(&conv, TOL, |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1).unwrap();
        project(t, y, 1)
    })));
    out.push(("relu", check(&[random(&[3, 7], 3)], TOL, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 3)
    })));
    let bn = [random(&[3, 2, 3, 3], 4), random(&[2], 5), random(&[2], 6)];
    out.push(("batch_norm", check(&bn, TOL, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train).unwrap();
        project(t, y, 4)
    })));
    out.push(("avg_pool+reshape", check(&[random(&[2, 3, 4, 5], 7)], TOL, |t, v| {
        let p = t.adaptive_avg_pool(v[0]).unwrap();
        let f = t.reshape(p, &[2, 3]).unwrap();
        project(t, f, 7)
    })));
    let fc = [random(&[4, 5], 8), random(&[3, 5], 9), random(&[3], 10)];
    out.push(("linear", check(&fc, TOL, |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        project(t, y, 8)
    })));
    let ew = [random(&[3, 4], 11), random(&[3, 4], 12)];
    out.push(("add/mul/scale", check(&ew, TOL, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let m = t.mul(a, v[1]).unwrap();
        let s = t.scale(m, 0.7);
        project(t, s, 11)
    })));
    let pairs = [random(&[5, 4], 13), random(&[5, 4], 14)];
    out.push(("l2_distance+contrastive", check(&pairs, TOL, |t, v| {
        let d = t.l2_distance(v[0], v[1]).unwrap();
        let l = t.contrastive(d, &[false, true, true, false, true], 1.2).unwrap();
        t.sum(l)
    })));
    let mut rpu = vec![random(&[2, 8, 3, 3], 15)];
    for (i, s) in RpuParams::<f64>::shapes(8).iter().enumerate() {
        rpu.push(random(s, 16 + i as u64).map(|x| 0.3 * x));
    }
    out.push(("rpu", check(&rpu, TOL, |t, v: &[Var]| {
        let vars = RpuVars {
            conv_a: v[1],
            conv_b: v[2],
            fc_weight: v[3],
            fc_bias: v[4],
        };
        let e = rpu_forward(t, v[0], &vars).unwrap();
        project(t, e, 15)
    })));
    out
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst_op = 0.0f64;
    for (name, r) in per_op_reports() {
        ensure(r.max_rel_error < 1e-4, format!("{name}: {:.2e} at {:?}", r.max_rel_error, r.worst))?;
        worst_op = worst_op.max(r.max_rel_error);
    }
    let net = check_dmrn(3, 1e-3);
    ensure(net.max_rel_error < 1e-3, format!("full network: {:.2e} at {:?}", net.max_rel_error, net.worst))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "per-op max {worst_op:.1e}; full network max {:.1e} over {} params ({} re-probed at 1e-6); {:.0?}",
        net.max_rel_error, net.entries, net.reprobed, elapsed
    ))
}

fn loss_closed_forms() -> Outcome {
    let a = pair_loss(0.4f64, true, 1.0);
    let b = pair_loss(0.5f64, false, 1.0);
    ensure((a - 0.18).abs() < 1e-12, format!("D=0.4 Y=1 gave {a}"))?;
    ensure((b - 0.125).abs() < 1e-12, format!("D=0.5 Y=0 gave {b}"))?;
    let cfg = BackboneConfig {
        input_size: 32,
        in_channels: 1,
        stage_channels: [8, 16, 32, 64],
        blocks_per_stage: 1,
    };
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let img = random(&[1, 1, 32, 32], 2);
    let batch = Tensor::new(&[2, 1, 32, 32], [img.data(), img.data()].concat()).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let o = pair_objective(&params, &mut tape, &bound, batch, &[false], &LossConfig::default()).unwrap();
    let total = tape.value(o.objective).data()[0];
    ensure(total == 0.0, format!("identical same-class pair gave loss {total}"))?;
    Ok(format!("0.18 (err {:.0e}), 0.125 (err {:.0e}), identical pair loss exactly 0", (a - 0.18).abs(), (b - 0.125).abs()))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let k = rng.random_range(2..7);
        let samples: Vec<(usize, usize)> = (0..rng.random_range(1..80))
            .map(|_| (rng.random_range(0..k), rng.random_range(0..k)))
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        samples.iter().for_each(|&(t, p)| cm.add(t, p));
        let r = compute_metrics(&cm).unwrap();
        let n = |f: &dyn Fn(usize, usize) -> bool| samples.iter().filter(|&&(t, p)| f(t, p)).count() as u64;
        ensure(r.accuracy == Ratio::new(n(&|t, p| t == p), samples.len() as u64), format!("trial {trial}: accuracy"))?;
        for c in 0..k {
            let tp = n(&|t, p| t == c && p == c);
            let fp = n(&|t, p| t != c && p == c);
            let fn_ = n(&|t, p| t == c && p != c);
            let tn = n(&|t, p| t != c && p != c);
            let m = &r.per_class[c];
            let expect = [
                Ratio::new(tp, tp + fn_),
                Ratio::new(tn, tn + fp),
                Ratio::new(tp, tp + fp),
                Ratio::new(2 * tp, 2 * tp + fp + fn_),
            ];
            ensure(
                [m.sensitivity, m.specificity, m.precision, m.f1] == expect,
                format!("trial {trial}, class {c}"),
            )?;
        }
    }
    // Class 0 positive: TP 8, FN 2, FP 1, TN 39.
    let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 1, 39]).unwrap();
    let r = compute_metrics(&cm).unwrap();
    let m = &r.per_class[0];
    let round4 = |v: Option<f64>| (v.unwrap() * 1e4).round() / 1e4;
    let got = [round4(m.sensitivity.value()), round4(m.precision.value()), round4(m.f1.value()), round4(r.accuracy.value())];
    ensure(got == [0.8, 0.8889, 0.8421, 0.94], format!("binary fixture gave {got:?}"))?;
    Ok("1000 random matrices match recount; fixture Sen 0.8000 Pre 0.8889 F1 0.8421 Acc 0.9400".into())
}

fn pairing_contracts() -> Outcome {
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    for mode in [PairMode::Uniform, PairMode::ClassBalanced] {
        let cfg = SamplerConfig { mode, seed: 1, pairs_per_epoch: None };
        let n = sample_pairs(&labels, 3, &cfg, 0).unwrap().pairs.len();
        ensure(n == 10, format!("{mode:?}: f=10 gave {n} pairs"))?;
    }
    ensure(exhaustive_count(10) == 45, "exhaustive_count(10)")?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for run in 0..256 {
        let k = rng.random_range(2..6);
        let labels: Vec<usize> = (0..rng.random_range(2..60)).map(|_| rng.random_range(0..k)).collect();
        let mode = if run % 2 == 0 { PairMode::Uniform } else { PairMode::ClassBalanced };
        let cfg = SamplerConfig { mode, seed: run, pairs_per_epoch: None };
        for p in sample_pairs(&labels, k, &cfg, run).unwrap().pairs {
            ensure(p.label() == u8::from(labels[p.anchor] != labels[p.partner]), format!("run {run}: wrong label"))?;
            ensure(p.anchor != p.partner, format!("run {run}: self pair"))?;
            checked += 1;
        }
    }

    let table1: Vec<usize> = TABLE1_SLICES.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let draws = 10_000;
    let cfg = SamplerConfig { mode: PairMode::ClassBalanced, seed: 0, pairs_per_epoch: Some(draws) };
    let mut counts = [0usize; 5];
    for p in sample_pairs(&table1, 5, &cfg, 0).unwrap().pairs {
        counts[table1[p.partner]] += 1;
    }
    let expected = draws as f64 / 5.0;
    let sigma = (draws as f64 * 0.2 * 0.8).sqrt();
    let worst = counts.iter().map(|&n| (n as f64 - expected).abs() / sigma).fold(0.0, f64::max);
    ensure(worst < 4.0, format!("partner counts {counts:?}, worst {worst:.2} sigma"))?;
    Ok(format!("P = f = 10; 45 exhaustive; {checked} labels correct; partners {counts:?} (max {worst:.2} sigma)"))
}

fn fold_contracts() -> Outcome {
    let classes: Vec<usize> = TABLE1_STUDIES.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    for seed in 0..100 {
        let plan = make_folds(&classes, 5, seed).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        ensure(sizes == [46, 46, 46, 46, 45], format!("seed {seed}: sizes {sizes:?}"))?;
        for f in 0..5 {
            let train = plan.train(f);
            ensure(plan.test(f).iter().all(|s| train.binary_search(s).is_err()), format!("seed {seed}: fold {f} overlaps"))?;
        }
        let mut all = plan.folds.concat();
        all.sort_unstable();
        ensure(all == (0..229).collect::<Vec<_>>(), format!("seed {seed}: not a partition"))?;
    }
    Ok("229 studies -> {46,46,46,46,45}; disjoint over 100 seeds".into())
}

fn end_to_end(data: &Path, runs: &Path) -> Outcome {
    let start = Instant::now();
    let dir = dmrn(&["cv", "--data", path(data), "--profile", "small", "--seed", "0", "--out-root", path(runs)])?;
    let elapsed = start.elapsed();
    let s = read_json(&dir.join("summary.json"));
    let acc = s["pooled_accuracy"].as_f64().unwrap();
    let floor = s["baseline_accuracy"].as_f64().unwrap();
    let line = format!("pooled accuracy {acc:.4}, raw-pixel floor {floor:.4}, {} studies, {elapsed:.0?}", s["studies"]);
    ensure(acc >= floor, format!("{line}: below floor"))?;
    ensure(acc >= 0.80, format!("{line}: below 0.80"))?;
    ensure(elapsed < Duration::from_secs(30 * 60), format!("{line}: too slow"))?;
    Ok(line)
}

/// Returns the hard outcome and whether the soft direction check held.
fn ablation(data: &Path, runs: &Path) -> (Outcome, bool) {
    let mut full = Vec::new();
    let mut last = Vec::new();
    for seed in 0..5 {
        let seed_s = seed.to_string();
        let dir = match dmrn(&["ablate", "--data", path(data), "--profile", "small", "--seed", &seed_s, "--out-root", path(runs)]) {
            Ok(d) => d,
            Err(e) => return (Err(e), false),
        };
        for v in ["multiscale", "final_stage"] {
            if !dir.join(v).join("report.csv").is_file() || !dir.join(v).join("summary.json").is_file() {
                return (Err(format!("seed {seed}: {v} report missing")), false);
            }
        }
        let table = fs::read_to_string(dir.join("comparison.csv")).unwrap();
        let rows: Vec<Vec<String>> = table.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
        if rows.len() != 2 || rows[0][2] != "4" || rows[1][2] != "1" {
            return (Err(format!("seed {seed}: loss terms per pair {rows:?}")), false);
        }
        full.push(rows[0][3].parse::<f64>().unwrap());
        last.push(rows[1][3].parse::<f64>().unwrap());
    }
    // Term count of the loss itself on a real batch.
    let cfg = BackboneConfig { input_size: 32, in_channels: 1, stage_channels: [8, 16, 32, 64], blocks_per_stage: 1 };
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let batch = Tensor::<f32>::from_fn(&[6, 1, 32, 32], |i| (i % 7) as f32 / 7.0);
    let mut terms = Vec::new();
    for loss in [LossConfig::default(), LossConfig::final_stage_only()] {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let o = pair_objective(&params, &mut tape, &bound, batch.clone(), &[true, false, true], &loss).unwrap();
        terms.push(o.terms.term_count() / 3);
    }
    if terms != [4, 1] {
        return (Err(format!("terms per pair {terms:?}")), false);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, ml) = (mean(&full), mean(&last));
    let soft = mf >= ml - 0.01;
    (
        Ok(format!(
            "terms per pair 4 vs 1; both reports emitted; mean accuracy {{1,2,3,4}} {mf:.4} vs {{4}} {ml:.4} (per seed {full:?} vs {last:?}); direction check {}",
            if soft { "holds" } else { "does not hold" }
        )),
        soft,
    )
}

fn determinism(data: &Path, runs: &Path) -> Outcome {
    let quick = ["--profile", "small", "--epochs", "2", "--seed", "5", "--out-root", path(runs)];
    let with = |head: &[&str]| -> Vec<String> { head.iter().chain(quick.iter()).map(|s| s.to_string()).collect() };
    let call = |v: Vec<String>| {
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        dmrn(&refs)
    };
    let ta = call(with(&["train", "--data", path(data)]))?;
    let tb = call(with(&["train", "--data", path(data)]))?;
    for name in ["checkpoint.dmrn", "training_log.csv", "svm.json"] {
        ensure(fs::read(ta.join(name)).unwrap() == fs::read(tb.join(name)).unwrap(), format!("{name} differs"))?;
    }
    let emb = |t: &Path| -> Result<Vec<u8>, String> {
        let ck = t.join("checkpoint.dmrn");
        let d = dmrn(&["embed", "--data", path(data), "--checkpoint", path(&ck), "--out-root", path(runs)])?;
        Ok(fs::read(d.join("embeddings.csv")).unwrap())
    };
    ensure(emb(&ta)? == emb(&tb)?, "embeddings.csv differs")?;
    let ca = call(with(&["cv", "--data", path(data)]))?;
    let cb = call(with(&["cv", "--data", path(data)]))?;
    let ha = dmrn_cli::output::hash_dir(&ca).map_err(|f| f.message)?;
    let hb = dmrn_cli::output::hash_dir(&cb).map_err(|f| f.message)?;
    ensure(ha == hb, "cv run directories differ")?;
    Ok(format!("checkpoint, embeddings.csv and cv reports identical (cv sha256 {})", &ha[..16]))
}

fn embedding_size() -> Outcome {
    let mut dims = Vec::new();
    for size in [32, 64, 96] {
        let cfg = BackboneConfig { input_size: size, in_channels: 1, stage_channels: [16, 32, 64, 128], blocks_per_stage: 1 };
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let img = Tensor::<f32>::full(&[1, size, size], 0.5);
        let d = embed(&params, &[&img]).map_err(|e| e.to_string())?[0].len();
        ensure(d == 32, format!("input {size}: dimension {d}"))?;
        dims.push(d);
    }
    Ok(format!("stage-4 width 128 -> {dims:?} for inputs 32/64/96"))
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("table1-small");
    let runs = tmp.path().join("runs");
    dmrn(&["gen", "--preset", "table1-small", "--seed", "0", "--out", path(&data)]).unwrap();

    let mut failed = Vec::new();
    let mut record = |n: usize, name: &str, outcome: Outcome| match outcome {
        Ok(detail) => report(&format!("PASS {n} {name}: {detail}")),
        Err(why) => {
            report(&format!("FAIL {n} {name}: {why}"));
            failed.push(n);
        }
    };
    record(1, "gradient oracle", guarded(gradient_oracle));
    record(2, "loss closed forms", guarded(loss_closed_forms));
    record(3, "metric oracle", guarded(metric_oracle));
    record(4, "pairing contracts", guarded(pairing_contracts));
    record(5, "fold contracts", guarded(fold_contracts));
    record(6, "end-to-end benchmark", guarded(|| end_to_end(&data, &runs)));
    let (hard, soft) = ablation(&data, &runs);
    record(7, "ablation", hard);
    if !soft {
        report("NOTE 7 ablation: soft direction check did not hold (reported, not enforced)");
    }
    record(8, "determinism", guarded(|| determinism(&data, &runs)));
    record(9, "embedding size", guarded(embedding_size));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
