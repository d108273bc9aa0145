//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails that is not listed in `KNOWN_RED`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use landmoe::adapter::{InsertionPlan, LandMoeModel, ParamGroup};
use landmoe::checkpoint::{load_model, save_model, MAGIC, VERSION};
use landmoe::cli::ablation_variants;
use landmoe::config::{LandMoeConfig, Profile};
use landmoe::data::{ConfusionMatrix, Experiment};
use landmoe::experts::{materialize, LowRankExpert};
use landmoe::rng::rng_for;
use landmoe::router::{balancing_loss, gate_logits, route, GateParams, Mode};
use landmoe::spectral::{half_width, irfft2, rfft2};
use landmoe::tensor::Tensor;
use landmoe::train::{batch_gradients, grad_check, train_run, worker_count, AdamW, GradCheckOptions, TrainConfig};
use landmoe::Error;
use rand::Rng;

/// Criteria that are reported red but do not fail the run.
const KNOWN_RED: &[u32] = &[9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn() -> Result<Outcome, Error>;

fn main() {
    let checks: Vec<(u32, &str, Check)> = vec![
        (1, "gradient oracle", c1_gradients),
        (2, "fft contract", c2_fft),
        (3, "routing contract", c3_routing),
        (4, "balancing loss", c4_balancing),
        (5, "low-rank contract", c5_low_rank),
        (6, "identity at init", c6_identity),
        (7, "frozen backbone", c7_frozen),
        (8, "metrics oracle", c8_metrics),
        (9, "ablation direction", c9_ablation),
        (10, "checkpoint roundtrip", c10_checkpoint),
        (11, "determinism", c11_determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("LANDMOE_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut hard_failures = 0;
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let r = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = t0.elapsed().as_secs_f64();
        let known = !r.pass && KNOWN_RED.contains(&id);
        println!(
            "criterion {id:>2} {name:<20} {}{} ({secs:.1}s) {}",
            if r.pass { "PASS" } else { "FAIL" },
            if known { " [known]" } else { "" },
            r.detail
        );
        if !r.pass && !known {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} criterion(s) failed");
        std::process::exit(1);
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn c1_gradients() -> Result<Outcome, Error> {
    let t0 = Instant::now();
    let desk = LandMoeConfig::desk(Profile::CrossSensor);
    let mut k2 = desk.clone();
    k2.top_k = 2;
    k2.scale_by_gate = true;
    let opts = GradCheckOptions::default();
    let a = grad_check(&desk, &opts)?;
    let b = grad_check(&k2, &opts)?;
    let elapsed = t0.elapsed();
    let groups_ok = [&a, &b].iter().all(|r| r.groups.len() == ParamGroup::TRAINABLE.len());
    let worst = a.max_rel_err().max(b.max_rel_err());
    Ok(outcome(
        a.passed() && b.passed() && groups_ok && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {:.2e} (top-1) / {:.2e} (top-2 gated), worst {worst:.2e} < {:.0e}, {:.1}s < 60s",
            a.max_rel_err(),
            b.max_rel_err(),
            opts.tol,
            elapsed.as_secs_f64()
        ),
    ))
}

/// Direct complex DFT of one channel, full spectrum.
fn naive_dft(x: &Tensor, ch: usize) -> Vec<(f64, f64)> {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let tau = std::f64::consts::TAU;
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let val = x.data()[(r * w + c) * d + ch];
                    let ang = -tau * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    re += val * ang.cos();
                    im += val * ang.sin();
                }
            }
            out[u * w + v] = (re, im);
        }
    }
    out
}

fn c2_fft() -> Result<Outcome, Error> {
    let t0 = Instant::now();
    let mut rng = rng_for(2, &[]);
    let (mut rt, mut lin, mut pars, mut dft) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for g in 0..200 {
        let (h, w) = if g == 0 { (6, 10) } else { (rng.random_range(1..=12), rng.random_range(1..=12)) };
        let d = rng.random_range(1..=3);
        let x = Tensor::randn(&[h, w, d], 1.0, &mut rng);
        let y = Tensor::randn(&[h, w, d], 1.0, &mut rng);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));

        let fx = rfft2(&x)?;
        rt = rt.max(irfft2(&fx)?.max_abs_diff(&x));

        let fy = rfft2(&y)?;
        let mix = Tensor::new(&[h, w, d], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect())?;
        let fm = rfft2(&mix)?;
        let exp_re: Vec<f64> = fx.real.data().iter().zip(fy.real.data()).map(|(p, q)| a * p + b * q).collect();
        let exp_im: Vec<f64> = fx.imag.data().iter().zip(fy.imag.data()).map(|(p, q)| a * p + b * q).collect();
        for (got, want) in fm.real.data().iter().zip(&exp_re).chain(fm.imag.data().iter().zip(&exp_im)) {
            lin = lin.max((got - want).abs());
        }

        let wf = half_width(w);
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let mut spec = 0.0;
        for u in 0..h {
            for v in 0..wf {
                let mult = if v == 0 || (w % 2 == 0 && v == w / 2) { 1.0 } else { 2.0 };
                for c in 0..d {
                    let i = (u * wf + v) * d + c;
                    spec += mult * (fx.real.data()[i].powi(2) + fx.imag.data()[i].powi(2));
                }
            }
        }
        pars = pars.max(rel(energy, spec / (h * w) as f64));

        if g < 40 {
            for c in 0..d {
                let full = naive_dft(&x, c);
                for u in 0..h {
                    for v in 0..wf {
                        let i = (u * wf + v) * d + c;
                        let (re, im) = full[u * w + v];
                        dft = dft.max((fx.real.data()[i] - re).abs()).max((fx.imag.data()[i] - im).abs());
                    }
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    Ok(outcome(
        rt < 1e-10 && lin < 1e-10 && dft < 1e-10 && pars < 1e-8 && elapsed < Duration::from_secs(10),
        format!(
            "roundtrip {rt:.1e}, linearity {lin:.1e}, direct DFT {dft:.1e} (< 1e-10); Parseval rel {pars:.1e} (< 1e-8); {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn c3_routing() -> Result<Outcome, Error> {
    let mut rng = rng_for(3, &[]);
    let (d, e) = (16, 4);
    let (mut rows, mut simplex_err, mut over_k, mut nondet) = (0usize, 0.0f64, 0usize, 0usize);
    for chunk in 0..100 {
        let k = 1 + chunk % 3;
        let gate = GateParams::new(Tensor::randn(&[d, e], 1.0, &mut rng), Tensor::randn(&[d, e], 0.5, &mut rng), k)?;
        let x = Tensor::randn(&[1000, d], 1.0, &mut rng);
        let r = route(&gate_logits(&x, &gate, Mode::Train, chunk as u64)?, k)?;
        for i in 0..1000 {
            let row = r.weights.row(i);
            simplex_err = simplex_err.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&v| v < 0.0) {
                simplex_err = f64::INFINITY;
            }
            if row.iter().filter(|&&v| v != 0.0).count() > k {
                over_k += 1;
            }
            rows += 1;
        }
        if chunk % 10 == 0 {
            let a = route(&gate_logits(&x, &gate, Mode::Eval, 1)?, k)?;
            let b = route(&gate_logits(&x, &gate, Mode::Eval, 99)?, k)?;
            if a.weights.data() != b.weights.data() || a.top1 != b.top1 {
                nondet += 1;
            }
        }
    }
    let hand = route(&Tensor::new(&[1, 3], vec![2.0, 1.0, 0.5])?, 2)?;
    let want = [0.7311, 0.2689, 0.0];
    let hand_err = hand.weights.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(outcome(
        rows == 100_000 && simplex_err < 1e-12 && over_k == 0 && nondet == 0 && hand_err <= 1e-4,
        format!(
            "{rows} rows, simplex err {simplex_err:.1e}, {over_k} rows over k, {nondet} eval mismatches, hand case {:?} err {hand_err:.1e}",
            hand.weights.data()
        ),
    ))
}

fn masses(rows: &[&[f64]]) -> Vec<Tensor> {
    rows.iter().map(|r| Tensor::new(&[1, r.len()], r.to_vec()).expect("row")).collect()
}

fn c4_balancing() -> Result<Outcome, Error> {
    let mut rng = rng_for(4, &[]);
    let g = Tensor::randn(&[10, 3], 1.0, &mut rng);
    let perfect = balancing_loss(&[g.clone(), g.clone(), g])?;
    let hand = balancing_loss(&masses(&[&[1.0, 3.0], &[3.0, 1.0]]))?;
    let mut scale = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(2..6);
        let e = rng.random_range(2..6);
        let base: Vec<Vec<f64>> = (0..b).map(|_| (0..e).map(|_| rng.random_range(0.1..5.0)).collect()).collect();
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let l0 = balancing_loss(&masses(&base.iter().map(Vec::as_slice).collect::<Vec<_>>()))?;
        let l1 = balancing_loss(&masses(&scaled.iter().map(Vec::as_slice).collect::<Vec<_>>()))?;
        scale = scale.max((l0 - l1).abs());
    }
    Ok(outcome(
        perfect == 0.0 && hand == 0.5 && scale <= 1e-12,
        format!("perfect balance {perfect:e}, hand case {hand}, max scale drift {scale:.1e}"),
    ))
}

fn c5_low_rank() -> Result<Outcome, Error> {
    let mut rng = rng_for(5, &[]);
    let mut worst = 0.0f64;
    let mut rank_loss = 0usize;
    for _ in 0..100 {
        let m = rng.random_range(4..=32);
        let d = rng.random_range(4..=64);
        let r = rng.random_range(1..=m.min(d) - 1);
        let e = LowRankExpert::new(Tensor::randn(&[m, r], 1.0, &mut rng), Tensor::randn(&[r, d], 1.0, &mut rng))?;
        let t = materialize(&e)?;
        let mat = nalgebra::DMatrix::from_row_slice(m, d, t.data());
        let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        worst = sv[r..].iter().fold(worst, |w, s| w.max(s / sv[0]));
        if sv[r - 1] / sv[0] < 1e-8 {
            rank_loss += 1;
        }
    }
    Ok(outcome(
        worst < 1e-8,
        format!("max tail singular value {worst:.1e} relative (< 1e-8); {rank_loss} experts below full rank r"),
    ))
}

fn c6_identity() -> Result<Outcome, Error> {
    let mut cfg = LandMoeConfig::desk(Profile::CrossSensor);
    cfg.filter_init = 0.0;
    let mut model = LandMoeModel::new(cfg.clone(), 6)?;
    let mut rng = rng_for(6, &[1]);
    let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let keep = name.starts_with("backbone.") || name.starts_with("filter.") || name.ends_with(".b") && name.contains(".expert");
        if !keep {
            let p = model.param_mut(&name).expect("listed");
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let mut mismatched = 0;
    for i in 0..16u64 {
        let img = Tensor::randn(&[cfg.image_size, cfg.image_size, cfg.channels], 1.0, &mut rng);
        let full = model.predict(&img, Mode::Eval, i)?;
        let frozen = model.predict_with_plan(&img, &InsertionPlan::Freeze, Mode::Eval, i)?;
        if full.data().iter().zip(frozen.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatched += 1;
        }
    }
    Ok(outcome(mismatched == 0, format!("{mismatched}/16 images differ bitwise (non-zero head, router, A, W_T, b_T)")))
}

fn c7_frozen() -> Result<Outcome, Error> {
    let cfg = TrainConfig::desk(Profile::CrossSensor);
    let exp = Experiment::new(cfg.profile, cfg.seed, cfg.model.num_classes, cfg.model.channels);
    let scenes = exp.source_scenes(&cfg.sizes())?;
    let mut model = LandMoeModel::new(cfg.model.clone(), cfg.seed)?;
    let before: Vec<(String, Vec<u64>)> = backbone_bits(&model);
    let mut opt = AdamW::default();
    let threads = worker_count();
    let batch = 2;
    for step in 0..200usize {
        let idx: Vec<usize> = (0..batch).map(|j| (step * batch + j) % scenes.len()).collect();
        let im: Vec<&Tensor> = idx.iter().map(|&i| &scenes[i].image).collect();
        let lb: Vec<&[usize]> = idx.iter().map(|&i| scenes[i].labels.as_slice()).collect();
        let g = batch_gradients(&model, &im, &lb, cfg.lambda, Mode::Train, step as u64, threads, None)?;
        g.store_into(&mut model);
        opt.step(&mut model.store, cfg.learning_rate, cfg.weight_decay)?;
    }
    let after = backbone_bits(&model);
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    let head_moved = model.param("head.w").is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
    Ok(outcome(
        changed == 0 && before.len() == after.len() && head_moved,
        format!("{changed}/{} backbone tensors changed after 200 steps (batch {batch}); head moved: {head_moved}", before.len()),
    ))
}

fn backbone_bits(model: &LandMoeModel) -> Vec<(String, Vec<u64>)> {
    model
        .store
        .iter()
        .filter(|(_, n, _)| ParamGroup::of(n) == Some(ParamGroup::Backbone))
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

struct Brute {
    macc: f64,
    miou: f64,
    acc: Vec<Option<f64>>,
}

/// Per-pixel counting without a confusion matrix.
fn brute_metrics(pred: &[usize], gt: &[usize], k: usize) -> Brute {
    let mut acc = Vec::new();
    let mut iou = Vec::new();
    for c in 0..k {
        let (mut tp, mut in_gt, mut in_either) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if p == c && g == c {
                tp += 1;
            }
            if g == c {
                in_gt += 1;
            }
            if p == c || g == c {
                in_either += 1;
            }
        }
        acc.push((in_gt > 0).then(|| 100.0 * tp as f64 / in_gt as f64));
        iou.push((in_either > 0).then(|| 100.0 * tp as f64 / in_either as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let p: Vec<f64> = v.iter().flatten().copied().collect();
        p.iter().sum::<f64>() / p.len() as f64
    };
    Brute { macc: mean(&acc), miou: mean(&iou), acc }
}

fn c8_metrics() -> Result<Outcome, Error> {
    let mut rng = rng_for(8, &[]);
    let (mut bad, mut absent_maps) = (0, 0);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let n = rng.random_range(1..=200);
        // Restrict the classes drawn so that some are absent from the ground truth.
        let gt_classes = rng.random_range(1..=k);
        let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..gt_classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &gt)?;
        let m = cm.metrics()?;
        let b = brute_metrics(&pred, &gt, k);
        if b.acc.iter().any(Option::is_none) {
            absent_maps += 1;
        }
        let same = m.macc.to_bits() == b.macc.to_bits()
            && m.miou.to_bits() == b.miou.to_bits()
            && m.per_class_acc.iter().map(|v| v.map(f64::to_bits)).eq(b.acc.iter().map(|v| v.map(f64::to_bits)));
        if !same {
            bad += 1;
        }
    }
    Ok(outcome(bad == 0, format!("{bad}/1000 maps differ; {absent_maps} maps had absent classes")))
}

fn c9_ablation() -> Result<Outcome, Error> {
    let t0 = Instant::now();
    let seeds = [0u64, 1, 2];
    let base = TrainConfig::desk(Profile::CrossSensor);
    let threads = worker_count();
    let mut means = Vec::new();
    for (name, cfg) in ablation_variants(&base) {
        let mut finals = Vec::new();
        for &s in &seeds {
            let mut c = cfg.clone();
            c.seed = s;
            let r = train_run(&c, None, threads)?;
            finals.push(r.history.last().expect("epoch 0 is always recorded").miou);
        }
        means.push((name, finals.iter().sum::<f64>() / finals.len() as f64));
    }
    let elapsed = t0.elapsed();
    let v = |n: &str| means.iter().find(|(m, _)| *m == n).map(|p| p.1).expect("variant");
    let (freeze, faf, molte, full) = (v("Freeze"), v("FAF-only"), v("MoLTE-only"), v("Full"));
    let margin = full - freeze >= 10.0;
    let order = freeze < faf && faf <= molte && molte <= full;
    let budget = elapsed < Duration::from_secs(15 * 60);
    let table = means.iter().map(|(n, m)| format!("{n} {m:.2}")).collect::<Vec<_>>().join(", ");
    Ok(outcome(
        margin && order && budget,
        format!(
            "target mIoU over seeds {seeds:?}: {table}; Full-Freeze {:.2} >= 10: {margin}; Freeze < FAF-only <= MoLTE-only <= Full: {order}; {:.0}s < 900s",
            full - freeze,
            elapsed.as_secs_f64()
        ),
    ))
}

fn c10_checkpoint() -> Result<Outcome, Error> {
    let cfg = LandMoeConfig::desk(Profile::CrossSensor);
    let mut model = LandMoeModel::new(cfg.clone(), 10)?;
    landmoe::train::perturb_trainable(&mut model, 10, 0.3);
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("m.lmoe");
    save_model(&path, &model)?;
    let loaded = load_model(&path)?;
    let mut rng = rng_for(10, &[]);
    let mut differ = 0;
    for _ in 0..4 {
        let img = Tensor::randn(&[cfg.image_size, cfg.image_size, cfg.channels], 1.0, &mut rng);
        let a = model.predict(&img, Mode::Eval, 0)?;
        let b = loaded.predict(&img, Mode::Eval, 0)?;
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            differ += 1;
        }
    }
    let bytes = std::fs::read(&path)?;
    let rejected = |b: Vec<u8>, name: &str| -> Result<bool, Error> {
        let p = dir.path().join(name);
        std::fs::write(&p, b)?;
        Ok(matches!(load_model(&p), Err(Error::Format(_))))
    };
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[MAGIC.len()..MAGIC.len() + 4].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let magic_rejected = rejected(bad_magic, "magic.lmoe")?;
    let version_rejected = rejected(bad_version, "version.lmoe")?;
    Ok(outcome(
        differ == 0 && magic_rejected && version_rejected,
        format!("{differ}/4 images differ; bad magic rejected: {magic_rejected}; bad version rejected: {version_rejected}"),
    ))
}

fn cli_train(dir: &Path) -> Result<bool, Error> {
    let status = Command::new(env!("CARGO_BIN_EXE_landmoe"))
        .args(["train", "--seed", "3", "--epochs", "3", "--out"])
        .arg(dir)
        .env("LANDMOE_THREADS", "1")
        .stdout(std::process::Stdio::null())
        .status()?;
    Ok(status.success())
}

fn c11_determinism() -> Result<Outcome, Error> {
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !cli_train(&a)? || !cli_train(&b)? {
        return Ok(outcome(false, "train command failed"));
    }
    let files = ["metrics.jsonl", "summary.csv", "config.txt", "best.lmoe"];
    let mut differing = Vec::new();
    for f in files {
        if std::fs::read(a.join(f))? != std::fs::read(b.join(f))? {
            differing.push(f);
        }
    }
    Ok(outcome(
        differing.is_empty(),
        format!("two single-threaded runs, {} files compared, differing: {differing:?}", files.len()),
    ))
}
