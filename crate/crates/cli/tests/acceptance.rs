//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria can be selected by number on the command line, e.g.
//! `cargo test -p diva-cli --test acceptance -- 1 4 6`. MNIST criteria read
//! `images-idx3-ubyte` and `labels-idx1-ubyte` from `DIVA_MNIST_DIR`
//! (default: `data/mnist` at the workspace root).
//!
//! Failures are reported but only turn into a non-zero exit status when
//! `DIVA_ACCEPTANCE_STRICT=1`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use diva_core::data::{load_idx, Dataset, IncrementalSchedule, Milestone};
use diva_core::diva::{predict, train_with, DivaConfig, PriorConfig, UpdateConfig};
use diva_core::dpmm::{
    cluster_moments, elbo, global_step, local_step, summarize, DpmmModel, DpmmPrior, Responsibilities,
    SufficientStats,
};
use diva_core::eval::{clustering_accuracy, LabeledAssignment};
use diva_core::moves::{shuffle_move, MoveConfig};
use diva_core::vae::{
    encode_batch, kl_hard, kl_soft, loss_and_grad, sample_latent_batch, KlTarget, OutputActivation, VaeConfig,
    VaeParams,
};
use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("DIVA_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

fn mnist_files() -> Result<(PathBuf, PathBuf), String> {
    let dir = mnist_dir();
    let images = dir.join("images-idx3-ubyte");
    let labels = dir.join("labels-idx1-ubyte");
    if images.exists() && labels.exists() {
        Ok((images, labels))
    } else {
        Err(format!("MNIST files not found in {}", dir.display()))
    }
}

fn diva_bin(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_diva"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("diva {args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// 2000 points, five unit-variance blobs centred on a radius-10 circle.
fn five_blobs() -> (Array2<f64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 2000;
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 5;
        let th = 2.0 * std::f64::consts::PI * c as f64 / 5.0;
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = 10.0 * th.cos() + e0;
        x[(i, 1)] = 10.0 * th.sin() + e1;
        labels.push(c as u64);
    }
    (x, labels)
}

fn write_blobs_csv(path: &Path) {
    let (x, labels) = five_blobs();
    let mut text = String::from("x,y,label\n");
    for (row, l) in x.rows().into_iter().zip(&labels) {
        text.push_str(&format!("{},{},{l}\n", row[0], row[1]));
    }
    fs::write(path, text).unwrap();
}

const BLOBS_CONFIG: &str = r#"{
    "dataset": {"format": "csv", "path": "blobs.csv", "label_column": "label"},
    "update": {"steps": 5},
    "max_epochs": 10,
    "seed": 7,
    "output_dir": "fit"
}"#;

fn read_metrics(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn criterion_1() -> Check {
    let dir = tempfile::tempdir().unwrap();
    write_blobs_csv(&dir.path().join("blobs.csv"));
    fs::write(dir.path().join("c.json"), BLOBS_CONFIG).unwrap();
    let t = Instant::now();
    diva_bin(&["fit-dpmm", "--config", "c.json"], dir.path())?;
    let secs = t.elapsed().as_secs_f64();
    let rows = read_metrics(&dir.path().join("fit/metrics.csv"));
    let last = rows.last().ok_or("no metrics")?;
    let k: usize = last[1].parse().unwrap();
    let acc: f64 = last[5].parse().unwrap();
    let moves = fs::read_to_string(dir.path().join("fit/moves.jsonl")).unwrap();
    let mut accepted = 0;
    let mut bad = 0;
    for line in moves.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["accepted"].as_bool().unwrap() {
            accepted += 1;
            if v["elbo_after"].as_f64().unwrap() < v["elbo_before"].as_f64().unwrap() {
                bad += 1;
            }
        }
    }
    ensure(
        acc >= 0.95 && (5..=10).contains(&k) && bad == 0 && secs < 60.0,
        format!("ACC {acc:.4}, K {k}, {accepted} accepted moves ({bad} lowering the ELBO), {secs:.1} s"),
    )
}

/// K = 5 model fit to hard assignments to the nearest of five random data points.
fn scrambled_start(x: &Array2<f64>, seed: u64) -> DpmmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<usize> = (0..5).map(|_| rng.random_range(0..x.nrows())).collect();
    let mut r = Array2::zeros((x.nrows(), 5));
    for (i, row) in x.rows().into_iter().enumerate() {
        let dist = |c: usize| {
            let p = x.row(seeds[c]);
            (row[0] - p[0]).powi(2) + (row[1] - p[1]).powi(2)
        };
        let best = (0..5).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        r[(i, best)] = 1.0;
    }
    let prior = PriorConfig::default().build(2).unwrap();
    let stats = summarize(x.view(), &Responsibilities { r }).unwrap();
    global_step(&DpmmModel::with_components(prior, 5).unwrap(), &stats).unwrap()
}

fn criterion_2() -> Check {
    let (x, _) = five_blobs();
    let mut model = scrambled_start(&x, 1);
    let mut trace = Vec::new();
    for _ in 0..20 {
        let resp = local_step(x.view(), &model).map_err(|e| e.to_string())?;
        let stats = summarize(x.view(), &resp).map_err(|e| e.to_string())?;
        model = global_step(&model, &stats).map_err(|e| e.to_string())?;
        trace.push(elbo(&model, &stats).map_err(|e| e.to_string())?);
    }
    let worst = trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs())
        .fold(f64::NEG_INFINITY, f64::max);
    ensure(
        worst <= 1e-6,
        format!(
            "ELBO {:.3} -> {:.3} over 20 sweeps, largest relative drop {worst:.2e}",
            trace[0],
            trace[19]
        ),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn max_rel_err(a: &DpmmModel, b: &DpmmModel) -> f64 {
    let mut worst: f64 = 0.0;
    let pairs = a
        .nw
        .mu_hat
        .iter()
        .zip(b.nw.mu_hat.iter())
        .chain(a.nw.lambda_hat.iter().zip(b.nw.lambda_hat.iter()))
        .chain(a.nw.a_hat.iter().zip(b.nw.a_hat.iter()))
        .chain(a.nw.b_hat.iter().zip(b.nw.b_hat.iter()))
        .chain(a.stick.alpha1.iter().zip(&b.stick.alpha1))
        .chain(a.stick.alpha0.iter().zip(&b.stick.alpha0));
    for (x, y) in pairs {
        worst = worst.max(rel_err(*x, *y));
    }
    worst
}

fn criterion_3() -> Check {
    let (x, _) = five_blobs();
    let model = scrambled_start(&x, 2);
    let full_resp = local_step(x.view(), &model).unwrap();
    let full = summarize(x.view(), &full_resp).unwrap();
    let parts: Vec<SufficientStats> = (0..4)
        .map(|b| {
            let batch = x.slice(s![b * 500..(b + 1) * 500, ..]);
            summarize(batch, &local_step(batch, &model).unwrap()).unwrap()
        })
        .collect();
    let memo = SufficientStats::sum(&parts).unwrap();
    let (a, b) = (global_step(&model, &full).unwrap(), global_step(&model, &memo).unwrap());
    let elbo_err = rel_err(elbo(&a, &full).unwrap(), elbo(&b, &memo).unwrap());
    let post_err = max_rel_err(&a, &b);
    ensure(
        elbo_err <= 1e-8 && post_err <= 1e-8,
        format!("relative ELBO error {elbo_err:.2e}, posterior error {post_err:.2e}"),
    )
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 16;
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu_i = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        let var_i = Array1::from_shape_simple_fn(d, || 0.3 + 1.5 * rng.random::<f64>());
        let mu_k = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        let var_k = Array1::from_shape_simple_fn(d, || 0.3 + 1.5 * rng.random::<f64>());
        let exact = kl_hard(mu_i.view(), var_i.view(), mu_k.view(), var_k.view()).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for _ in 0..samples {
            let mut log_ratio = 0.0;
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                let z = mu_i[j] + var_i[j].sqrt() * e;
                let lq = -0.5 * (var_i[j].ln() + e * e);
                let lp = -0.5 * (var_k[j].ln() + (z - mu_k[j]).powi(2) / var_k[j]);
                log_ratio += lq - lp;
            }
            sum += log_ratio;
        }
        worst = worst.max(rel_err(exact, sum / samples as f64));
    }

    // one-hot weights against a three-cluster model
    let prior = DpmmPrior::new(d, 1.0, 1e-2, 0.5, d as f64 + 2.0).unwrap();
    let mut model = DpmmModel::with_components(prior, 3).unwrap();
    for c in 0..3 {
        model.nw.lambda_hat[c] = 5.0 + c as f64;
        for j in 0..d {
            model.nw.mu_hat[(c, j)] = rng.sample(StandardNormal);
            model.nw.a_hat[(c, j)] = 3.0 + rng.random::<f64>();
            model.nw.b_hat[(c, j)] = 1.0 + rng.random::<f64>();
        }
    }
    let mu_i = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
    let var_i = Array1::from_shape_simple_fn(d, || 0.5 + rng.random::<f64>());
    let mut exact_match = true;
    for c in 0..3 {
        let mut onehot = vec![0.0; 3];
        onehot[c] = 1.0;
        let soft = kl_soft(mu_i.view(), var_i.view(), &model, &onehot).map_err(|e| e.to_string())?;
        let (m, v) = cluster_moments(&model, c).map_err(|e| e.to_string())?;
        let hard = kl_hard(mu_i.view(), var_i.view(), m.view(), v.view()).map_err(|e| e.to_string())?;
        exact_match &= soft == hard;
    }
    ensure(
        worst <= 0.01 && exact_match,
        format!("worst Monte-Carlo relative gap {worst:.2e} over 20 pairs, one-hot kl_soft exact: {exact_match}"),
    )
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Central differences over every weight and bias of a 3-3-2 network.
fn gradient_check(output: OutputActivation, seed: u64) -> Result<(usize, usize, f64), String> {
    let cfg = VaeConfig {
        input_dim: 3,
        hidden_dims: vec![3],
        latent_dim: 2,
        output_activation: output,
        kld_weight: 0.5,
        ..VaeConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = VaeParams::init(&cfg, seed).map_err(|e| e.to_string())?;
    for layer in params.layers_mut() {
        layer.bias.mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let x = gaussian(5, 3, &mut rng).mapv(|v| 0.6 * v.tanh());
    let noise = gaussian(5, 2, &mut rng);
    let prior = DpmmPrior::new(2, 1.0, 1e-2, 0.5, 4.0).unwrap();
    let mut model = DpmmModel::with_components(prior, 2).unwrap();
    model.nw.mu_hat = ndarray::array![[-0.3, 0.2], [0.4, -0.1]];
    model.nw.lambda_hat.fill(20.0);
    model.nw.a_hat.fill(5.0);
    model.nw.b_hat = ndarray::array![[2.0, 3.0], [4.0, 1.5]];
    let (mu, lv) = encode_batch(x.view(), &params, &cfg).map_err(|e| e.to_string())?;
    let z = sample_latent_batch(mu.view(), lv.view(), noise.view()).map_err(|e| e.to_string())?;
    let target = KlTarget::from_model(z.view(), &model).map_err(|e| e.to_string())?;
    let eval = loss_and_grad(&params, &cfg, x.view(), noise.view(), &target).map_err(|e| e.to_string())?;
    let loss = |p: &VaeParams| loss_and_grad(p, &cfg, x.view(), noise.view(), &target).unwrap().loss.total;
    let eps = 1e-5;
    let mut checked = 0;
    let mut failed = 0;
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, numeric: f64| {
        checked += 1;
        let gap = (analytic - numeric).abs();
        let tol = (1e-4 * analytic.abs().max(numeric.abs())).max(1e-7);
        worst = worst.max(gap / tol);
        if gap > tol {
            failed += 1;
        }
    };
    for li in 0..params.layers().len() {
        for idx in ndarray::indices(params.layers()[li].weight.dim()) {
            let mut plus = params.clone();
            plus.layers_mut()[li].weight[idx] += eps;
            let mut minus = params.clone();
            minus.layers_mut()[li].weight[idx] -= eps;
            compare(eval.grads[li].weight[idx], (loss(&plus) - loss(&minus)) / (2.0 * eps));
        }
        for j in 0..params.layers()[li].bias.len() {
            let mut plus = params.clone();
            plus.layers_mut()[li].bias[j] += eps;
            let mut minus = params.clone();
            minus.layers_mut()[li].bias[j] -= eps;
            compare(eval.grads[li].bias[j], (loss(&plus) - loss(&minus)) / (2.0 * eps));
        }
    }
    if eval.loss.kl <= 0.0 {
        return Err("KL term vanished; check is vacuous".into());
    }
    Ok((checked, failed, worst))
}

fn criterion_5() -> Check {
    let mut total = 0;
    let mut failed = 0;
    let mut worst: f64 = 0.0;
    for (output, seed) in [(OutputActivation::Tanh, 5), (OutputActivation::Linear, 6)] {
        let (c, f, w) = gradient_check(output, seed)?;
        total += c;
        failed += f;
        worst = worst.max(w);
    }
    ensure(
        failed == 0,
        format!("{total} parameters checked, {failed} outside tolerance, worst gap/tolerance {worst:.2e}"),
    )
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=30);
        let clusters = rng.random_range(1..=4u64);
        let labels_n = rng.random_range(1..=3u64);
        let assignments: Vec<u64> = (0..n).map(|_| rng.random_range(0..clusters)).collect();
        let labels: Vec<u64> = (0..n).map(|_| rng.random_range(0..labels_n)).collect();
        let acc = clustering_accuracy(&LabeledAssignment::new(assignments.clone(), labels.clone()).unwrap()).unwrap();
        let mut best = 0;
        for code in 0..labels_n.pow(clusters as u32) {
            let f: Vec<u64> = (0..clusters).map(|c| code / labels_n.pow(c as u32) % labels_n).collect();
            let hits = assignments
                .iter()
                .zip(&labels)
                .filter(|(&a, &l)| f[a as usize] == l)
                .count();
            best = best.max(hits);
        }
        if acc != best as f64 / n as f64 {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches} of 50 instances differ from exhaustive search"))
}

fn mnist_config_json(images: &Path, labels: &Path, out: &str) -> String {
    serde_json::json!({
        "dataset": {"format": "idx", "path": images, "labels": labels, "classes": [0, 1, 2]},
        "max_epochs": 20,
        "seed": 1,
        "record_timing": false,
        "output_dir": out,
    })
    .to_string()
}

/// Runs criterion 7 twice; the second run feeds criterion 11.
struct MnistDesk {
    acc: f64,
    secs: f64,
    identical: bool,
}

fn mnist_desk(dir: &Path) -> Result<MnistDesk, String> {
    let (images, labels) = mnist_files()?;
    fs::write(dir.join("a.json"), mnist_config_json(&images, &labels, "a")).unwrap();
    fs::write(dir.join("b.json"), mnist_config_json(&images, &labels, "b")).unwrap();
    let t = Instant::now();
    diva_bin(&["train-diva", "--config", "a.json"], dir)?;
    let secs = t.elapsed().as_secs_f64();
    diva_bin(&["export-latent", "--config", "a.json", "--checkpoint", "a", "--out", "z.csv"], dir)?;
    let report: serde_json::Value =
        serde_json::from_str(&diva_bin(&["eval", "--latent", "z.csv"], dir)?).map_err(|e| e.to_string())?;
    let acc = report["acc"].as_f64().ok_or("no ACC in report")?;
    diva_bin(&["train-diva", "--config", "b.json"], dir)?;
    let identical = fs::read(dir.join("a/metrics.csv")).unwrap() == fs::read(dir.join("b/metrics.csv")).unwrap();
    Ok(MnistDesk { acc, secs, identical })
}

fn criterion_7(desk: &Result<MnistDesk, String>) -> Check {
    let d = desk.as_ref().map_err(Clone::clone)?;
    ensure(
        d.acc >= 0.80 && d.secs <= 1200.0,
        format!("ACC {:.4} on digits 0-2 after 20 epochs, {:.1} s", d.acc, d.secs),
    )
}

/// One schedule run of criteria 8 and 9.
struct Incremental {
    k: Vec<usize>,
    acc: f64,
    violations: Vec<String>,
    checked: usize,
}

fn incremental_run(data: &Dataset, schedule: &IncrementalSchedule, moves: bool) -> Result<Incremental, String> {
    let mut cfg = DivaConfig {
        max_epochs: 100,
        seed: 1,
        record_timing: false,
        ..DivaConfig::default()
    };
    if !moves {
        cfg.update = UpdateConfig {
            moves: MoveConfig::disabled(),
            ..UpdateConfig::default()
        };
    }
    let labels = data.labels.clone().unwrap();
    let mut k = Vec::new();
    let mut prev: Option<HashMap<u64, u64>> = None;
    let mut violations = Vec::new();
    let mut checked = 0;
    let (state, _) = train_with(data, Some(schedule), &cfg, |_, report| {
        k.push(report.metrics.k);
        let truth: Vec<u64> = report.update.source_indices.iter().map(|&i| labels[i]).collect();
        let majority = LabeledAssignment::new(report.update.assignments.clone(), truth)?.majority_labels();
        let touched: HashSet<u64> = report.update.touched_ids().into_iter().collect();
        if let Some(before) = &prev {
            for (id, label) in &majority {
                if touched.contains(id) {
                    continue;
                }
                if let Some(old) = before.get(id) {
                    checked += 1;
                    if old != label {
                        violations.push(format!("epoch {}: id {id} {old}->{label}", report.metrics.epoch));
                    }
                }
            }
        }
        prev = Some(majority);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let pred = predict(&state, &cfg.vae, data.features.view()).map_err(|e| e.to_string())?;
    let acc = clustering_accuracy(&LabeledAssignment::new(pred, labels).unwrap()).unwrap();
    Ok(Incremental {
        k,
        acc,
        violations,
        checked,
    })
}

fn incremental_runs() -> Result<(Incremental, Incremental), String> {
    let (images, labels) = mnist_files()?;
    let data = load_idx(&images, &labels).map_err(|e| e.to_string())?;
    let schedule = IncrementalSchedule::new(vec![
        Milestone { epoch: 0, classes: vec![0, 1, 2] },
        Milestone { epoch: 30, classes: (0..5).collect() },
        Milestone { epoch: 60, classes: (0..7).collect() },
        Milestone { epoch: 90, classes: (0..10).collect() },
    ])
    .unwrap();
    Ok((
        incremental_run(&data, &schedule, true)?,
        incremental_run(&data, &schedule, false)?,
    ))
}

fn criterion_8(runs: &Result<(Incremental, Incremental), String>) -> Check {
    let (full, ablation) = runs.as_ref().map_err(Clone::clone)?;
    let mut grew = Vec::new();
    for m in [30, 60, 90] {
        let before = full.k[m - 1];
        let after = full.k[m..(m + 10).min(full.k.len())].iter().copied().max().unwrap_or(0);
        grew.push((m, before, after));
    }
    let all_grew = grew.iter().all(|&(_, b, a)| a > b);
    let gain = full.acc - ablation.acc;
    let summary: Vec<String> = grew.iter().map(|(m, b, a)| format!("@{m}: {b}->{a}")).collect();
    ensure(
        all_grew && gain >= 0.10,
        format!(
            "K {}; final ACC {:.4} vs moves-disabled {:.4} ({:+.1} pp)",
            summary.join(", "),
            full.acc,
            ablation.acc,
            100.0 * gain
        ),
    )
}

fn criterion_9(runs: &Result<(Incremental, Incremental), String>) -> Check {
    let (full, _) = runs.as_ref().map_err(Clone::clone)?;
    let shown: Vec<&str> = full.violations.iter().take(8).map(String::as_str).collect();
    ensure(
        full.violations.is_empty(),
        format!(
            "{} of {} untouched identifier checks changed majority label{}{}",
            full.violations.len(),
            full.checked,
            if shown.is_empty() { "" } else { ": " },
            shown.join("; ")
        ),
    )
}

fn criterion_10() -> Check {
    let (x, _) = five_blobs();
    let prior = PriorConfig::default().build(2).unwrap();
    // centres placed in ascending order of a mass that differs per blob
    let keep: Vec<usize> = (0..x.nrows()).filter(|&i| i % 5 >= i / 5 % 5).collect();
    let x = x.select(ndarray::Axis(0), &keep);
    let mut model = DpmmModel::with_components(prior, 5).unwrap();
    for c in 0..5 {
        let th = 2.0 * std::f64::consts::PI * c as f64 / 5.0;
        model.nw.mu_hat[(c, 0)] = 10.0 * th.cos();
        model.nw.mu_hat[(c, 1)] = 10.0 * th.sin();
    }
    let stats = summarize(x.view(), &local_step(x.view(), &model).unwrap()).unwrap();
    let model = global_step(&model, &stats).unwrap();
    let stats = summarize(x.view(), &local_step(x.view(), &model).unwrap()).unwrap();
    let model = global_step(&model, &stats).unwrap();
    let before = local_step(x.view(), &model).unwrap();
    let out = shuffle_move(&model, &stats).map_err(|e| e.to_string())?;
    let after = local_step(x.view(), &out.model).unwrap();
    let index_after: HashMap<u64, usize> = out.model.component_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut worst: f64 = 0.0;
    for (old, id) in model.component_ids.iter().enumerate() {
        let new = index_after[id];
        for i in 0..x.nrows() {
            worst = worst.max((after.r[(i, new)] - before.r[(i, old)]).abs());
        }
    }
    let sorted = out.stats.n_hat.windows(2).into_iter().all(|w| w[0] >= w[1]);
    let masses: Vec<String> = out.stats.n_hat.iter().map(|m| format!("{m:.0}")).collect();
    ensure(
        out.record.accepted && sorted && worst <= 1e-10 && out.order != (0..5).collect::<Vec<_>>(),
        format!(
            "order {:?}, masses after [{}], largest responsibility change {worst:.1e}",
            out.order,
            masses.join(", ")
        ),
    )
}

fn criterion_11(desk: &Result<MnistDesk, String>) -> Check {
    let dir = tempfile::tempdir().unwrap();
    write_blobs_csv(&dir.path().join("blobs.csv"));
    fs::write(dir.path().join("c.json"), BLOBS_CONFIG).unwrap();
    diva_bin(&["fit-dpmm", "--config", "c.json", "--no-timing", "--output-dir", "a"], dir.path())?;
    diva_bin(&["fit-dpmm", "--config", "c.json", "--no-timing", "--output-dir", "b"], dir.path())?;
    let blobs_same = fs::read(dir.path().join("a/metrics.csv")).unwrap() == fs::read(dir.path().join("b/metrics.csv")).unwrap();
    let d = desk.as_ref().map_err(Clone::clone)?;
    ensure(
        blobs_same && d.identical,
        format!(
            "criterion-1 metrics identical: {blobs_same}, criterion-7 metrics identical: {}",
            d.identical
        ),
    )
}

fn run(selected: &HashSet<usize>, n: usize, name: &str, check: impl FnOnce() -> Check, failures: &mut usize) {
    if !selected.is_empty() && !selected.contains(&n) {
        return;
    }
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1} s]"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL {n:>2} {name}: {detail} [{secs:.1} s]");
        }
    }
}

fn main() {
    let selected: HashSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    run(&selected, 1, "synthetic DPMM recovery", criterion_1, &mut failures);
    run(&selected, 2, "ELBO monotonicity", criterion_2, &mut failures);
    run(&selected, 3, "memoization equivalence", criterion_3, &mut failures);
    run(&selected, 4, "KL-loss correctness", criterion_4, &mut failures);
    run(&selected, 5, "gradient suite", criterion_5, &mut failures);
    run(&selected, 6, "ACC oracle equivalence", criterion_6, &mut failures);

    let desk_dir = tempfile::tempdir().unwrap();
    let desk = if wants(7) || wants(11) {
        mnist_desk(desk_dir.path())
    } else {
        Err("not run".into())
    };
    run(&selected, 7, "MNIST 3-digit desk run", || criterion_7(&desk), &mut failures);

    let runs = if wants(8) || wants(9) {
        incremental_runs()
    } else {
        Err("not run".into())
    };
    run(&selected, 8, "incremental adaptation", || criterion_8(&runs), &mut failures);
    run(&selected, 9, "traceability", || criterion_9(&runs), &mut failures);
    run(&selected, 10, "shuffle", criterion_10, &mut failures);
    run(&selected, 11, "determinism", || criterion_11(&desk), &mut failures);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        if std::env::var("DIVA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    } else {
        println!("all acceptance criteria passed");
    }
}
