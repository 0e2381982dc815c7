//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (visible with `--nocapture`) before asserting.

use std::time::{Duration, Instant};

use mapfuse::diagnostics::{default_gradcheck, random_image, selftest};
use mapfuse::fusion::{deep_maps, fuse_scale, AttentionMaps};
use mapfuse::loss::{gate_decisions, gated_ssim_loss, loss_var_ssim, ssim_window, var_ssim_window};
use mapfuse::metrics::{self, ms_ssim, Metric};
use mapfuse::nn::{GradCheckConfig, Graph};
use mapfuse::reference;
use mapfuse::tensor::Tensor;
use mapfuse::train::{
    ablate, synthetic_dataset, synthetic_pairs, AblationAxes, AblationRow, SyntheticMode,
};
use mapfuse::{infer_fuse, load_checkpoint, save_checkpoint, train, Error, Image, LossGate, SsimParams, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, what: &str, outcome: Result<String, String>) {
    match &outcome {
        Ok(detail) => println!("PASS criterion {n} ({what}): {detail}"),
        Err(detail) => println!("FAIL criterion {n} ({what}): {detail}"),
    }
    if let Err(detail) = outcome {
        panic!("criterion {n} failed: {detail}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn as64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// The sanity setting shared by criteria 5 and 7.
fn sanity_config() -> TrainConfig {
    TrainConfig {
        crop: 64,
        steps: Some(300),
        learning_rate: 1e-4,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let outcome = (|| {
        let reports = default_gradcheck(&GradCheckConfig::default()).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
        for r in &reports {
            ensure(r.passed(), || format!("{r}"))?;
        }
        ensure(reports.iter().any(|r| r.label.starts_with("network depth 3")), || {
            "full network case missing".into()
        })?;
        ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
        Ok(format!("{} cases, max rel err {worst:.2e}, {elapsed:.1?}", reports.len()))
    })();
    verdict(1, "gradient correctness", outcome);
}

#[test]
fn criterion_2_loss_matches_window_oracle() {
    let outcome = (|| {
        let p = SsimParams::default();
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let (x, y, f) = (random_image(20, 20, 3 * seed), random_image(20, 20, 3 * seed + 1), random_image(20, 20, 3 * seed + 2));
            for gate in LossGate::ALL {
                let (fast, _) = gated_ssim_loss(&as64(&x), &as64(&y), &as64(&f), 20, 20, &p, 1, gate)
                    .map_err(|e| e.to_string())?;
                let slow = reference::gated_ssim_loss(&x, &y, &f, &p, 1, gate);
                worst = worst.max((fast.loss - slow).abs());
            }
        }
        ensure(worst <= 1e-6, || format!("max |loss - oracle| = {worst:.3e}"))?;

        // Equal variances: Y's window is X's reflected, so the gate must pick Y.
        let wx: Vec<f64> = (0..121).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let wy: Vec<f64> = wx.iter().rev().copied().collect();
        let wf: Vec<f64> = wx.iter().map(|v| 0.5 * v + 0.2).collect();
        let picked = var_ssim_window(&wx, &wy, &wf, &p);
        ensure(picked == ssim_window(&wy, &wf, &p), || "equal variance did not select Y".into())?;
        ensure(picked != ssim_window(&wx, &wf, &p), || "tie case does not distinguish X from Y".into())?;
        Ok(format!("max |err| {worst:.2e} over 20 triples x 2 gates; tie selects Y"))
    })();
    verdict(2, "loss fidelity", outcome);
}

#[test]
fn criterion_3_mapping_invariants() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_tensor = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::<f64>::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let f = rand_tensor(&[6, 4, 4]);
        let other = rand_tensor(&[6, 4, 4]);

        let mut g = Graph::<f64>::new();
        let (fx, fy) = (g.input(f.clone()), g.input(f.clone()));
        let m = deep_maps(&mut g, fx, fy).map_err(|e| e.to_string())?;
        ensure(g.value(m.map_x) == g.value(m.map_y), || "map_x != map_y for identical features".into())?;

        // Row sums of the softmax over a cross-correlation of unrelated features.
        let a = g.input(f.clone().reshape(&[6, 16]).unwrap());
        let b = g.input(other.clone().reshape(&[6, 16]).unwrap());
        let at = g.transpose(a).map_err(|e| e.to_string())?;
        let corr = g.matmul(at, b).map_err(|e| e.to_string())?;
        let soft = g.softmax_rows(corr).map_err(|e| e.to_string())?;
        let worst_row = g
            .value(soft)
            .data()
            .chunks(16)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        ensure(worst_row <= 1e-6, || format!("softmax row sum off by {worst_row:.3e}"))?;

        let (fx, fy) = (g.input(f.clone()), g.input(other.clone()));
        let ones = g.input(f.map(|_| 1.0));
        let zeros = g.input(f.map(|_| 0.0));
        let unit = fuse_scale(&mut g, fx, fy, &AttentionMaps { map_x: ones, map_y: ones }).map_err(|e| e.to_string())?;
        let sum = f.zip_map(&other, |a, b| a + b).unwrap();
        ensure(g.value(unit) == &sum, || "unit maps do not give f_x + f_y".into())?;
        let only_x = fuse_scale(&mut g, fx, fy, &AttentionMaps { map_x: ones, map_y: zeros }).map_err(|e| e.to_string())?;
        ensure(g.value(only_x) == &f, || "(1, 0) maps do not give f_x".into())?;
        Ok(format!("maps bit-equal, worst softmax row error {worst_row:.1e}, unit/zero maps exact"))
    })();
    verdict(3, "mapping invariants", outcome);
}

fn uniform_levels() -> Image {
    Image::from_fn(16, 16, |r, c| (r * 16 + c) as f32 / 255.0)
}

#[test]
fn criterion_4_metrics_match_oracles() {
    let outcome = (|| {
        let lines = selftest(50, 1).map_err(|e| e.to_string())?;
        let metric_lines = lines.iter().filter(|l| l.name.starts_with("metric")).count();
        ensure(metric_lines == Metric::ALL.len(), || format!("{metric_lines} metric lines"))?;
        for l in &lines {
            ensure(l.passed(), || l.to_string())?;
        }

        let close = |v: f64, want: f64, what: &str| ensure((v - want).abs() <= 1e-9, || format!("{what} = {v}, expected {want}"));
        close(metrics::entropy(&uniform_levels()), 8.0, "EN of all 256 levels")?;
        let half = Image::from_fn(8, 8, |r, _| if r < 4 { 0.0 } else { 1.0 });
        close(metrics::standard_deviation(&half), 127.5, "SD of half 0 / half 255")?;
        let stripes = Image::from_fn(8, 8, |_, c| (c % 2) as f32);
        close(metrics::spatial_frequency(&stripes), 255.0, "SF of alternating stripes")?;
        let x = random_image(32, 32, 77);
        close(ms_ssim(&x, &x, &x), 1.0, "MS-SSIM(x, x)")?;
        let w = as64(&x)[..121].to_vec();
        close(ssim_window(&w, &w, &SsimParams::default()), 1.0, "SSIM(x, x)")?;
        let worst = lines.iter().map(|l| l.max_abs_err).fold(0.0, f64::max);
        Ok(format!("10 metrics x 50 triples, worst |err| {worst:.1e}; closed forms exact"))
    })();
    verdict(4, "metric oracle parity", outcome);
}

#[test]
fn criterion_5_sanity_training() {
    let start = Instant::now();
    let outcome = (|| {
        let ds = synthetic_dataset(32, 64, 3, SyntheticMode::Identical).map_err(|e| e.to_string())?;
        let (ckpt, log) = train(&ds, &sanity_config()).map_err(|e| e.to_string())?;
        let (first, last) = (log.initial_loss().unwrap(), log.final_loss().unwrap());
        ensure(log.steps.len() == 300, || format!("{} steps logged", log.steps.len()))?;
        ensure(last < 0.5 * first, || format!("final loss {last:.4} vs initial {first:.4}"))?;

        let held_out = synthetic_pairs(1, 64, 999, SyntheticMode::Identical).map_err(|e| e.to_string())?;
        let src = &held_out[0].x;
        let fused = infer_fuse(&ckpt, src, src).map_err(|e| e.to_string())?;
        let ssim = 1.0 - loss_var_ssim(src, src, &fused, &SsimParams::default(), 1).map_err(|e| e.to_string())?.loss;
        ensure(ssim > 0.7, || format!("held-out SSIM {ssim:.4}"))?;
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(15 * 60), || format!("took {elapsed:?}"))?;
        Ok(format!("loss {first:.4} -> {last:.4}, held-out SSIM {ssim:.4}, {elapsed:.0?}"))
    })();
    verdict(5, "sanity training", outcome);
}

#[test]
fn criterion_6_determinism_and_persistence() {
    let outcome = (|| {
        let ds = synthetic_dataset(6, 32, 11, SyntheticMode::Modal).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            crop: 32,
            steps: Some(6),
            base_channels: 8,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (a, log_a) = train(&ds, &cfg).map_err(|e| e.to_string())?;
        let (b, log_b) = train(&ds, &cfg).map_err(|e| e.to_string())?;
        ensure(log_a.to_csv() == log_b.to_csv(), || "loss logs differ".into())?;
        ensure(a.to_bytes() == b.to_bytes(), || "checkpoints differ".into())?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&a, &p1).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint(&p1).map_err(|e| e.to_string())?;
        save_checkpoint(&loaded, &p2).map_err(|e| e.to_string())?;
        let (bytes1, bytes2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        ensure(bytes1 == bytes2, || "save -> load -> save changed bytes".into())?;

        let mut rejected = 0;
        let mut corruptions: Vec<Vec<u8>> = vec![
            bytes1[..bytes1.len() / 2].to_vec(),
            [bytes1.as_slice(), &[0u8; 3]].concat(),
            Vec::new(),
        ];
        let mut bad_magic = bytes1.clone();
        bad_magic[0] ^= 0xff;
        corruptions.push(bad_magic);
        let mut bad_count = bytes1.clone();
        let len_end = 6 + 4 + u32::from_le_bytes(bytes1[6..10].try_into().unwrap()) as usize;
        bad_count[len_end] = bad_count[len_end].wrapping_add(1);
        corruptions.push(bad_count);
        for bytes in &corruptions {
            let path = dir.path().join("bad.ckpt");
            std::fs::write(&path, bytes).unwrap();
            match load_checkpoint(&path) {
                Err(Error::Integrity { .. }) | Err(Error::Incompatible { .. }) => rejected += 1,
                Err(e) => return Err(format!("unexpected error kind: {e}")),
                Ok(_) => return Err("corrupted checkpoint was accepted".into()),
            }
        }
        Ok(format!("identical logs and checkpoints, stable round trip, {rejected} corruptions rejected"))
    })();
    verdict(6, "determinism and persistence", outcome);
}

#[test]
fn criterion_7_ablation_harness() {
    let outcome = (|| {
        // The sanity pairs, with fewer steps per arm to keep six runs short.
        let ds = synthetic_dataset(32, 64, 3, SyntheticMode::Identical).map_err(|e| e.to_string())?;
        let (train_set, held_out) = ds.split_tail(2).map_err(|e| e.to_string())?;
        let base = TrainConfig { steps: Some(20), ..sanity_config() };
        let axes = AblationAxes::parse("fusion,loss_gate").map_err(|e| e.to_string())?;
        let selected = Metric::DEFAULT;
        let rows = ablate(&train_set, &held_out, &base, axes, &selected, 2).map_err(|e| e.to_string())?;
        ensure(rows.len() == 6, || format!("{} rows", rows.len()))?;

        let mut csv = Vec::new();
        AblationRow::write_csv(&rows, &selected, &mut csv).map_err(|e| e.to_string())?;
        let mut reader = csv::Reader::from_reader(csv.as_slice());
        let header = reader.headers().map_err(|e| e.to_string())?.clone();
        ensure(header.len() == 8 + selected.len(), || format!("header {header:?}"))?;
        let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        ensure(records.len() == 6, || format!("{} CSV records", records.len()))?;
        let seeds: Vec<&str> = records.iter().map(|r| &r[3]).collect();
        ensure(seeds.iter().all(|s| *s == seeds[0]), || format!("seeds differ: {seeds:?}"))?;
        for r in &rows {
            ensure(r.status == "ok", || format!("{} / {}: {}", r.config.fusion_rule, r.config.loss_gate, r.status))?;
        }

        // Every step of the mapping arm stays finite.
        let mapping = rows
            .iter()
            .find(|r| r.config.fusion_rule.as_str() == "mapping" && r.config.loss_gate == LossGate::Var)
            .ok_or("no mapping/var row")?;
        let (_, log) = train(&train_set, &mapping.config).map_err(|e| e.to_string())?;
        ensure(log.steps.iter().all(|s| s.loss.is_finite()), || "non-finite step loss".into())?;
        ensure(log.final_loss() == mapping.final_loss, || "rerun differs from the ablation row".into())?;
        Ok(format!("6 rows + header, shared seed {}, mapping arm finite over {} steps", seeds[0], log.steps.len()))
    })();
    verdict(7, "ablation harness", outcome);
}

#[test]
fn criterion_8_variance_gate_behaviour() {
    let outcome = (|| {
        let p = SsimParams::default();
        let x = random_image(32, 32, 5);
        let y = Image::filled(32, 32, 0.3).unwrap();
        let fused = random_image(32, 32, 6);
        let report = loss_var_ssim(&x, &y, &fused, &p, 1).map_err(|e| e.to_string())?;
        ensure(report.frac_selected_x == 1.0, || format!("frac_selected_x = {}", report.frac_selected_x))?;

        // Y windows keep variance but have mean close to X's, so an offset
        // flips mean-gate decisions and leaves the variance gate alone.
        let y = Image::from_fn(32, 32, |r, c| 0.4 + 0.1 * (((r * 7 + c * 3) % 5) as f32 / 4.0));
        let y_shift = Image::from_fn(32, 32, |r, c| y.get(r, c) + 0.2);
        let decisions = |img: &Image, gate| gate_decisions(&x, img, &p, 1, gate).map_err(|e| e.to_string());
        let var_same = decisions(&y, LossGate::Var)? == decisions(&y_shift, LossGate::Var)?;
        let mean_before = decisions(&y, LossGate::Mean)?;
        let mean_after = decisions(&y_shift, LossGate::Mean)?;
        let flipped = mean_before.iter().zip(&mean_after).filter(|(a, b)| a != b).count();
        ensure(var_same, || "offset changed a variance-gate decision".into())?;
        ensure(flipped > 0, || "offset changed no mean-gate decision".into())?;
        Ok(format!("textured X always selected; offset flips {flipped}/{} mean decisions, 0 variance decisions", mean_before.len()))
    })();
    verdict(8, "variance gate", outcome);
}
