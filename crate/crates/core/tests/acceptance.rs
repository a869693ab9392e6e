//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so every line is printed; exits non-zero if any hard
//! criterion fails. Criterion 7 trains the default model and takes several
//! minutes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bitsird::binconv::{binary_conv2d, ConvSpec};
use bitsird::bitcore::{sign_quantize, FloatTensor};
use bitsird::checkpoint::Checkpoint;
use bitsird::cli::bench_one;
use bitsird::config::RunConfig;
use bitsird::data::Mask;
use bitsird::dbconv::{db_conv, param_bits, ConvKind, DbConvParams};
use bitsird::grad::approx_error_sq;
use bitsird::metrics::{evaluate, mean_image_iou, miou, pd_fa};
use bitsird::network::{Model, NetConfig};
use bitsird::train::{train_loop, validate, TrainReport};
use bitsird::verify::{dysoftsign_fd_check, normal_mode_ste_check, smooth_mode_layer_checks};

enum Verdict {
    Pass(String),
    Fail(String),
    /// Soft criterion not met: reported, not fatal.
    Warn(String),
}

type Outcome = Result<Verdict, String>;

fn pm1(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Direct ±1 cross-correlation over explicit index arithmetic.
fn pm1_conv_oracle(a: &FloatTensor, w: &FloatTensor, spec: &ConvSpec) -> Vec<f64> {
    let (c, h, wd) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (n, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = Vec::with_capacity(n * oh * ow);
    for o in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0i64;
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as i64 - p as i64;
                            let ix = (ox * s + kx) as i64 - p as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                continue;
                            }
                            let av = pm1(a.data()[(ch * h + iy as usize) * wd + ix as usize]);
                            let wv = pm1(w.data()[((o * c + ch) * k + ky) * k + kx]);
                            acc += (av * wv) as i64;
                        }
                    }
                }
                out.push(acc as f64);
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..500 {
        let (c, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = *[1, 3].choose(&mut rng).unwrap();
        let (s, p) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
        let (h, w) = (rng.gen_range(k..=9), rng.gen_range(k..=9));
        let spec = ConvSpec::new(c, n, k, s, p).map_err(|e| e.to_string())?;
        // Small integers so exact zeros are frequent.
        let a = FloatTensor::from_fn(&[c, h, w], |_| rng.gen_range(-2i32..=2) as f64);
        let wt = FloatTensor::from_fn(&[n, c, k, k], |_| rng.gen_range(-2i32..=2) as f64);
        let got = binary_conv2d(
            &sign_quantize(&a).map_err(|e| e.to_string())?,
            &sign_quantize(&wt).map_err(|e| e.to_string())?,
            &spec,
        )
        .map_err(|e| e.to_string())?;
        if got.data() != pm1_conv_oracle(&a, &wt, &spec).as_slice() {
            return Ok(Verdict::Fail(format!("case {case} (c={c} n={n} k={k} s={s} p={p} {h}x{w}) differs")));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Ok(Verdict::Fail(format!("500 configurations exact but took {secs:.2}s")));
    }
    Ok(Verdict::Pass(format!("500 configurations bit-exact in {secs:.2}s")))
}

/// `Y[m] = W[m]·a[m]` with `W = α·Sign(w) + β`, written out directly.
fn dense_db_oracle(a: &FloatTensor, w: &[f64]) -> Vec<f64> {
    let c = w.len();
    let beta = w.iter().sum::<f64>() / c as f64;
    let alpha = w.iter().map(|v| (v - beta).powi(2)).sum::<f64>().sqrt();
    let plane = a.len() / c;
    a.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (alpha * pm1(w[i / plane]) + beta) * x)
        .collect()
}

fn criterion_2() -> Outcome {
    let e = |e: bitsird::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let c = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = FloatTensor::from_fn(&[c, h, w], |_| rng.gen_range(-3.0..3.0));
        let lw: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = db_conv(&a, &DbConvParams::new(FloatTensor::new(&[c], lw.clone()).map_err(e)?).map_err(e)?).map_err(e)?;
        for (x, y) in got.data().iter().zip(dense_db_oracle(&a, &lw)) {
            let rel = (x - y).abs() / y.abs().max(1e-300);
            if (x - y).abs() > 1e-12 {
                worst = worst.max(rel);
            }
            if rel > 1e-6 && (x - y).abs() > 1e-12 {
                return Ok(Verdict::Fail(format!("case {case}: decomposed {x} vs dense {y}")));
            }
        }
    }

    let a = FloatTensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-3.0..3.0));
    // Constant latent weights: α = 0 and the map is β·a.
    let constant = DbConvParams::new(FloatTensor::full(&[3], 0.7)).map_err(e)?;
    let y = db_conv(&a, &constant).map_err(e)?;
    if y.max_abs_diff(&a.map(|v| 0.7 * v)) > 1e-12 {
        return Ok(Verdict::Fail("alpha = 0 case is not beta * a".into()));
    }
    let p = DbConvParams::new(FloatTensor::new(&[3], vec![0.5, -1.5, 2.0]).map_err(e)?).map_err(e)?;
    if db_conv(&FloatTensor::zeros(&[3, 4, 4]), &p).map_err(e)?.data().iter().any(|&v| v != 0.0) {
        return Ok(Verdict::Fail("zero input does not give zero output".into()));
    }
    let base = db_conv(&a, &p).map_err(e)?;
    for lambda in [0.25, 3.0, 17.5] {
        let scaled = db_conv(&a.map(|v| lambda * v), &p).map_err(e)?;
        if scaled.max_abs_diff(&base.map(|v| lambda * v)) > 1e-9 {
            return Ok(Verdict::Fail(format!("scaling covariance fails at lambda = {lambda}")));
        }
    }
    Ok(Verdict::Pass(format!(
        "500 cases within 1e-6 relative (worst {worst:.1e}); alpha=0, zero-input and scaling cases hold"
    )))
}

fn criterion_3() -> Outcome {
    let adabin = param_bits(ConvKind::AdaBinConv, 64, 64, 3).map_err(|e| e.to_string())?;
    let db = param_bits(ConvKind::DbConv, 64, 64, 3).map_err(|e| e.to_string())?;
    // 64·c + n·c·k² and 64 + c at n = c = 64, k = 3.
    let (want_adabin, want_db) = (64 * 64 + 64 * 64 * 9, 64 + 64);
    if (adabin, db) != (want_adabin, want_db) || adabin / db != 320 {
        return Ok(Verdict::Fail(format!("{adabin} vs {db} bits")));
    }
    Ok(Verdict::Pass(format!("{adabin} vs {db} bits, ratio {}", adabin / db)))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for k in [0.1, 1.0, 10.0, 100.0] {
        let scaled = approx_error_sq(k, 10_000.0).map_err(|e| e.to_string())? * k;
        if !(1.96..=2.04).contains(&scaled) {
            return Ok(Verdict::Fail(format!("k = {k}: k*Err = {scaled:.5}")));
        }
        parts.push(format!("k={k}: {scaled:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 5.0 {
        return Ok(Verdict::Fail(format!("bound holds but took {secs:.2}s")));
    }
    Ok(Verdict::Pass(format!("k*Err(k) {} in {secs:.2}s", parts.join(", "))))
}

fn criterion_5() -> Outcome {
    let e = |e: bitsird::Error| e.to_string();
    let mut worst = (String::new(), 0.0f64);
    for (name, report) in smooth_mode_layer_checks(2024, 4).map_err(e)? {
        let err = report.max_rel_error();
        if err > 1e-3 {
            return Ok(Verdict::Fail(format!("{name}: relative error {err:.3e}")));
        }
        if err >= worst.1 {
            worst = (name, err);
        }
    }
    let ste = normal_mode_ste_check(2025, 30).map_err(e)?;
    if ste > 1e-7 {
        return Ok(Verdict::Fail(format!("normal-mode Sign sites deviate by {ste:.3e}")));
    }
    let ds = dysoftsign_fd_check().map_err(e)?;
    if ds > 1e-4 {
        return Ok(Verdict::Fail(format!("dysoftsign_grad relative error {ds:.3e}")));
    }
    Ok(Verdict::Pass(format!(
        "smooth-mode worst {:.1e} ({}); STE closed form {ste:.1e}; dysoftsign_grad {ds:.1e}",
        worst.1, worst.0
    )))
}

fn criterion_6() -> Outcome {
    let model = Model::build(&NetConfig::default()).map_err(|e| e.to_string())?;
    let report = model.account((512, 512)).map_err(|e| e.to_string())?;
    let (params, ops) = (report.params(), report.ops());
    let t = report.total();
    let itemized = report.rows.iter().map(|r| r.cost.params_b).sum::<u64>() == t.params_b
        && report.rows.iter().map(|r| r.cost.flops_f).sum::<u64>() == t.flops_f
        && (params - (t.params_f as f64 + t.params_b as f64 / 32.0)).abs() < 1e-9
        && (ops - (t.flops_f as f64 + t.bops_b as f64 / 64.0)).abs() < 1e-3;
    let detail = format!(
        "Params {:.3} K (fp {} + binary {}/32), OPs {:.4} G (fp {} + binary {}/64)",
        params / 1e3,
        t.params_f,
        t.params_b,
        ops / 1e9,
        t.flops_f,
        t.bops_b
    );
    if !(8e3..=12e3).contains(&params) || !(0.2e9..=0.5e9).contains(&ops) || !itemized {
        return Ok(Verdict::Fail(detail));
    }
    Ok(Verdict::Pass(detail))
}

struct DeskRun {
    model: Model,
    report: TrainReport,
    cfg: RunConfig,
    seconds: f64,
}

fn desk_run() -> Result<DeskRun, String> {
    let cfg = RunConfig::default();
    let dataset = cfg.dataset().map_err(|e| e.to_string())?;
    let mut model = Model::build(&cfg.net).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = train_loop(&mut model, &dataset, &cfg.train, |r| {
        eprintln!(
            "    epoch {:>2}: loss {:.4} mIoU {:.4} Pd {:.4} [{:.0}s]",
            r.epoch,
            r.loss,
            r.val.miou,
            r.val.pd,
            start.elapsed().as_secs_f64()
        );
    })
    .map_err(|e| e.to_string())?;
    Ok(DeskRun {
        model,
        report,
        cfg,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn criterion_7(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let last = run.report.last().ok_or("no epochs")?;
    let detail = format!(
        "{} epochs on {} scenes: mIoU {:.4}, Pd {:.4}, Fa {:.2}e-5 in {:.0}s",
        run.cfg.train.epochs, run.cfg.data.count, last.val.miou, last.val.pd, last.val.fa, run.seconds
    );
    if last.val.miou >= 0.5 && last.val.pd >= 0.8 && run.seconds <= 1800.0 {
        Ok(Verdict::Pass(detail))
    } else {
        Ok(Verdict::Fail(detail))
    }
}

fn criterion_8(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let k_init = run.cfg.net.k_init;
    let last = run.report.last().ok_or("no epochs")?;
    if run.report.epochs.iter().any(|r| r.sharpness.iter().any(|(_, k)| !(*k > 0.0))) {
        return Ok(Verdict::Fail("a sharpness left the positive range".into()));
    }
    let (name, k) = last
        .sharpness
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("no Sign sites")?;
    let detail = format!("largest k: {name} = {k:.4} ({:.0}x of {k_init})", k / k_init);
    if k / k_init >= 10.0 {
        Ok(Verdict::Pass(detail))
    } else {
        Ok(Verdict::Warn(detail))
    }
}

fn criterion_9(run: &Result<DeskRun, String>) -> Outcome {
    let e = |e: bitsird::Error| e.to_string();
    // Determinism on a reduced configuration: two runs, same bytes.
    let small = RunConfig::parse(
        "net.stage_channels = 8,16,32\nnet.blocks = 1,1,2,1,1\ntrain.epochs = 3\ndata.size = 32\ndata.count = 24\ndata.val_count = 8\n",
    )
    .map_err(e)?;
    let dataset = small.dataset().map_err(e)?;
    let mut images = Vec::new();
    for _ in 0..2 {
        let mut m = Model::build(&small.net).map_err(e)?;
        train_loop(&mut m, &dataset, &small.train, |_| {}).map_err(e)?;
        images.push(Checkpoint::from_model(&m).to_bytes());
    }
    if images[0] != images[1] {
        return Ok(Verdict::Fail("repeat training produced different checkpoints".into()));
    }

    let run = run.as_ref().map_err(Clone::clone)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("final.ckpt");
    let ckpt = Checkpoint::from_model(&run.model);
    ckpt.save(&path).map_err(e)?;
    let loaded = Checkpoint::load(&path).map_err(e)?;
    if loaded.to_bytes() != std::fs::read(&path).map_err(|e| e.to_string())? {
        return Ok(Verdict::Fail("save -> load -> save is not byte-identical".into()));
    }
    let mut fresh = Model::build(&run.cfg.net).map_err(e)?;
    loaded.apply(&mut fresh).map_err(e)?;
    let dataset = run.cfg.dataset().map_err(e)?;
    let got = validate(&fresh, &dataset.val, run.cfg.train.threshold, run.cfg.train.match_dist).map_err(e)?;
    let want = &run.report.last().ok_or("no epochs")?.val;
    let diff = [
        (got.miou - want.miou).abs(),
        (got.pd - want.pd).abs(),
        (got.fa - want.fa).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if diff > 1e-9 {
        return Ok(Verdict::Fail(format!("reloaded model metrics differ by {diff:.3e}")));
    }
    Ok(Verdict::Pass(format!(
        "repeat runs byte-identical ({} bytes); round trip byte-identical; reloaded metrics differ by {diff:.1e}",
        images[0].len()
    )))
}

fn plane(h: usize, w: usize, on: &[(usize, usize)]) -> (FloatTensor, Mask) {
    let mut m = Mask::empty(h, w);
    for &(r, c) in on {
        m.set(r, c, true);
    }
    (m.to_tensor(), m)
}

fn square(r0: usize, c0: usize, side: usize) -> Vec<(usize, usize)> {
    (r0..r0 + side).flat_map(|r| (c0..c0 + side).map(move |c| (r, c))).collect()
}

fn criterion_10() -> Outcome {
    let e = |e: bitsird::Error| e.to_string();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let (t, m) = plane(64, 64, &square(30, 30, 5));
    checks.push(("perfect mIoU = 1", miou(&[t.clone()], &[m.clone()], 0.5).map_err(e)? == 1.0));
    checks.push(("perfect Pd/Fa = (1, 0)", pd_fa(&[t], &[m.clone()], 0.5, 3.0).map_err(e)? == (1.0, 0.0)));
    let empty = Mask::empty(64, 64).to_tensor();
    checks.push(("empty mIoU = 0", miou(&[empty.clone()], &[m.clone()], 0.5).map_err(e)? == 0.0));
    checks.push(("empty Pd/Fa = (0, 0)", pd_fa(&[empty], &[m.clone()], 0.5, 3.0).map_err(e)? == (0.0, 0.0)));
    // Dilating a 5x5 square by one pixel gives 7x7: IoU = 25 / 49.
    let (dilated, _) = plane(64, 64, &square(29, 29, 7));
    checks.push(("dilated IoU = 25/49", miou(&[dilated], &[m], 0.5).map_err(e)? == 25.0 / 49.0));
    // 100x100: target detected at a 2 px offset plus a spurious 4-pixel blob.
    let (_, gt) = plane(100, 100, &square(20, 20, 3));
    let mut pred = square(22, 20, 3);
    pred.extend(square(70, 70, 2));
    let (pred, _) = plane(100, 100, &pred);
    let (pd, fa) = pd_fa(&[pred], &[gt], 0.5, 3.0).map_err(e)?;
    checks.push(("offset target + 4 px blob: Pd = 1, Fa = 40e-5", pd == 1.0 && (fa - 40.0).abs() < 1e-9));

    if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
        return Ok(Verdict::Fail(format!("example failed: {name}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut preds = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..20 {
        let (_, m) = plane(32, 32, &square(rng.gen_range(2..25), rng.gen_range(2..25), rng.gen_range(1..5)));
        let p = FloatTensor::from_fn(&[1, 32, 32], |i| {
            let on = m.bits()[i];
            if rng.gen_bool(0.03) {
                if on { 0.2 } else { 0.9 }
            } else if on {
                0.8
            } else {
                0.1
            }
        });
        preds.push(p);
        masks.push(m);
    }
    let base = evaluate(&preds, &masks, 0.5, 3.0).map_err(e)?;
    let base_mean = mean_image_iou(&preds, &masks, 0.5).map_err(e)?;
    let mut order: Vec<usize> = (0..20).collect();
    order.shuffle(&mut rng);
    let pp: Vec<FloatTensor> = order.iter().map(|&i| preds[i].clone()).collect();
    let mm: Vec<Mask> = order.iter().map(|&i| masks[i].clone()).collect();
    let shuffled = evaluate(&pp, &mm, 0.5, 3.0).map_err(e)?;
    if shuffled.counts != base.counts || shuffled.miou != base.miou || shuffled.pd != base.pd || shuffled.fa != base.fa {
        return Ok(Verdict::Fail("metrics change under a 20-image shuffle".into()));
    }
    if (mean_image_iou(&pp, &mm, 0.5).map_err(e)? - base_mean).abs() > 1e-12 {
        return Ok(Verdict::Fail("per-image mean IoU changes under a shuffle".into()));
    }
    Ok(Verdict::Pass(format!(
        "{} hand-built examples exact; 20-image shuffle invariant (mIoU {:.4}, Pd {:.4}, Fa {:.1})",
        checks.len(),
        base.miou,
        base.pd,
        base.fa
    )))
}

fn criterion_11() -> Outcome {
    let mut parts = Vec::new();
    let mut soft_ok = true;
    for (size, channels) in [(64, 16), (256, 64)] {
        let row = bench_one(size, channels, 0.2, 11).map_err(|e| e.to_string())?;
        if !row.exact_match {
            return Ok(Verdict::Fail(format!("packed and oracle outputs differ at {size}x{size}, c=n={channels}")));
        }
        if size == 256 && row.speedup() < 2.0 {
            soft_ok = false;
        }
        parts.push(format!("{size}²/c={channels}: exact, {:.1}x", row.speedup()));
    }
    let detail = parts.join("; ");
    Ok(if soft_ok { Verdict::Pass(detail) } else { Verdict::Warn(format!("{detail} (below 2x)")) })
}

fn main() {
    // `cargo test -- <filter>` passes arguments; listing requests get nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, outcome: Outcome| {
        let line = match &outcome {
            Ok(Verdict::Pass(d)) => format!("PASS  [{id:>2}] {name}: {d}"),
            Ok(Verdict::Warn(d)) => format!("WARN  [{id:>2}] {name}: {d}"),
            Ok(Verdict::Fail(d)) => format!("FAIL  [{id:>2}] {name}: {d}"),
            Err(d) => format!("FAIL  [{id:>2}] {name}: error: {d}"),
        };
        println!("{line}");
        results.push((id, name, outcome));
    };

    record(1, "XNOR exactness", criterion_1());
    record(2, "DB Conv decomposition", criterion_2());
    record(3, "parameter-ratio claim", criterion_3());
    record(4, "DySoftSign error bound", criterion_4());
    record(5, "gradient correctness", criterion_5());
    record(6, "budget reproduction", criterion_6());
    eprintln!("    training the default model (criterion 7)...");
    let run = desk_run();
    record(7, "desk-scale learning", criterion_7(&run));
    record(8, "DySoftSign annealing (soft)", criterion_8(&run));
    record(9, "determinism and persistence", criterion_9(&run));
    record(10, "metric oracles", criterion_10());
    record(11, "bench gate", criterion_11());

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, o)| !matches!(o, Ok(Verdict::Pass(_)) | Ok(Verdict::Warn(_))))
        .map(|(id, _, _)| *id)
        .collect();
    println!(
        "acceptance: {} passed, {} warned, {} failed",
        results.iter().filter(|(_, _, o)| matches!(o, Ok(Verdict::Pass(_)))).count(),
        results.iter().filter(|(_, _, o)| matches!(o, Ok(Verdict::Warn(_)))).count(),
        failed.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
