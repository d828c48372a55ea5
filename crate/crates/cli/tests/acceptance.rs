//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p mptp-cli --test acceptance`. The process exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use candle_core::{DType, Device, Tensor, Var};
use mptp_core::checkpoint::CheckpointBundle;
use mptp_core::config::RunConfig;
use mptp_core::error::Error;
use mptp_core::gradcheck::check_var;
use mptp_core::losses::{scalar, total_loss, wbce, wdice, LossConfig};
use mptp_core::metrics::{confusion, evaluate, macro_average, BinaryMask};
use mptp_core::model::{is_encoder_param, Ablation, Fusion, ModelConfig, Segmenter};
use mptp_core::msff::{expand_slices, fuse_groups, merge_slices};
use mptp_core::nn::to_f64_vec;
use mptp_core::params::ParamStore;
use mptp_core::ppe::PpeConfig;
use mptp_core::pretrain::{neg_cosine, AugmentConfig, AugmentKind, AugmentationPolicy, SiameseNet};
use mptp_core::synthetic::{shapes_dataset, write_dataset};
use mptp_core::text_encoder::Caption;
use mptp_core::train::{Stage1Trainer, Stage2Init, Stage2Trainer};
use mptp_core::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOSS_FLOOR: f64 = 0.375;
const LOSS_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-9;
const REPR_STD_MIN: f64 = 1e-3;
const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_STEPS: usize = 300;
const DETERMINISM_TOL: f64 = 1e-6;

type Criterion = (&'static str, fn() -> Result<String>, Duration);

fn captions(n: usize) -> Vec<Caption> {
    (0..n).map(|i| Caption::new(&format!("finding {i} in the upper left")).unwrap()).collect()
}

fn toy(image: usize, channels: usize, batch: usize) -> RunConfig {
    let mut cfg = RunConfig::toy(image, channels);
    cfg.stage1.batch_size = batch;
    cfg.stage2.batch_size = batch;
    cfg
}

fn shape_contracts() -> Result<String> {
    let configs = [(4usize, 32usize), (8, 64), (64, 224)];
    for (c, h) in configs {
        let model_cfg = ModelConfig {
            ppe: if h == 224 { PpeConfig::default() } else { PpeConfig::toy(h, c) },
            ..ModelConfig::toy(h, c)
        };
        ensure!(model_cfg.ppe.base_channels == c);
        let store = ParamStore::new(1, DType::F32);
        let model = Segmenter::new(&store.root(), &model_cfg, model_cfg.embedder.build()?, &Ablation::default())?;
        let b = 1;
        let x = Tensor::rand(0f32, 1.0, (b, 3, h, h), &Device::Cpu)?;
        let pyr = model.encoder.forward_t(&x, &captions(b), false, Exec::Parallel)?;
        let expect_pyr = [vec![b, c, h, h], vec![b, 2 * c, h / 2, h / 2], vec![b, 4 * c, h / 4, h / 4]];
        for (t, e) in pyr.levels.iter().zip(&expect_pyr) {
            ensure!(t.dims() == e.as_slice(), "C={c} H={h}: pyramid {:?} != {e:?}", t.dims());
        }
        let Fusion::Msff(msff) = &model.fusion else {
            anyhow::bail!("default model has no MSFF");
        };
        let groups = msff.build_groups(&pyr)?;
        for g in &groups {
            ensure!(g.shapes().to_vec() == expect_pyr.to_vec(), "C={c} H={h}: group {:?}", g.shapes());
        }
        let fused = fuse_groups(&groups)?;
        let expect_fused = [vec![b, 3 * c, h, h], vec![b, 6 * c, h / 2, h / 2], vec![b, 12 * c, h / 4, h / 4]];
        for (t, e) in fused.tensors.iter().zip(&expect_fused) {
            ensure!(t.dims() == e.as_slice(), "C={c} H={h}: fused {:?} != {e:?}", t.dims());
        }
        let probs = model.cascade.forward_t(&fused, false)?;
        ensure!(probs.dims() == [b, 1, h, h], "C={c} H={h}: mask {:?}", probs.dims());
    }
    Ok(format!("{configs:?}"))
}

fn msff_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (b, h, w, c) = (rng.random_range(1..3), 2 * rng.random_range(1..6), 2 * rng.random_range(1..6), rng.random_range(1..5));
        let values: Vec<f64> = (0..b * h * w * c).map(|_| rng.random_range(-100..100) as f64).collect();
        let x = Tensor::from_vec(values.clone(), (b, h, w, c), &Device::Cpu)?;
        let merged = merge_slices(&x)?;
        let mut got = to_f64_vec(&merged)?;
        let mut want = values;
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        ensure!(got == want, "multiset changed for {:?}", x.dims());
        let round = expand_slices(&merge_slices(&x)?)?;
        ensure!(round.dims() == x.dims(), "expand(merge(x)) {:?} != {:?}", round.dims(), x.dims());
        let y = Tensor::zeros((b, h / 2, w / 2, 4 * c), DType::F64, &Device::Cpu)?;
        let back = merge_slices(&expand_slices(&y)?)?;
        ensure!(back.dims() == y.dims(), "merge(expand(y)) {:?} != {:?}", back.dims(), y.dims());
    }
    Ok("100 tensors".into())
}

fn random_mask(rng: &mut impl Rng, n: usize, nonempty: bool) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        if !nonempty || v.iter().any(|&x| x > 0.0) {
            return v;
        }
    }
}

fn loss_analytics() -> Result<String> {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..200 {
        let y = random_mask(&mut rng, 2 * 8 * 8, true);
        let y = Tensor::from_vec(y, (2, 1, 8, 8), &Device::Cpu)?;
        let l = scalar(&total_loss(&y, &y, &cfg)?)?;
        worst = worst.max((l - LOSS_FLOOR).abs());
    }
    ensure!(worst <= LOSS_TOL, "total_loss(y,y) deviates by {worst:e}");

    let y = Tensor::from_vec(random_mask(&mut rng, 64, true), (1, 1, 8, 8), &Device::Cpu)?;
    let half = (y.zeros_like()? + 0.5)?;
    let b = scalar(&wbce(&half, &y, &cfg)?)?;
    ensure!((b - std::f64::consts::LN_2).abs() <= LOSS_TOL, "wbce(0.5) = {b}");

    for _ in 0..1000 {
        let n = 16;
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t = random_mask(&mut rng, n, false);
        let d = scalar(&wdice(
            &Tensor::from_vec(p, (1, 1, 4, 4), &Device::Cpu)?,
            &Tensor::from_vec(t, (1, 1, 4, 4), &Device::Cpu)?,
            &cfg,
        )?)?;
        ensure!((0.0..=1.0).contains(&d), "wdice {d} outside [0,1]");
    }
    Ok(format!("max |total(y,y) - 0.375| = {worst:.1e}, wbce(0.5) = {b:.9}"))
}

fn gradient_checks() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = LossConfig::default();
    let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
    let pred = Var::from_vec(p, (1, 1, 4, 4), &Device::Cpu)?;
    let target = Tensor::from_vec(random_mask(&mut rng, 16, true), (1, 1, 4, 4), &Device::Cpu)?;
    let loss_check = check_var(&pred, || total_loss(pred.as_tensor(), &target, &cfg), FD_STEP)?;
    ensure!(loss_check.max_rel_error < GRAD_REL_TOL, "total_loss rel err {:e}", loss_check.max_rel_error);

    let store = ParamStore::new(5, DType::F64);
    let gate = mptp_core::upattention::AttentionGate::new(&store.root().pp("gate"), 2, 3)?;
    let fine = Var::randn(0f64, 1.0, (1, 2, 4, 4), &Device::Cpu)?;
    let up = Var::randn(0f64, 1.0, (1, 3, 4, 4), &Device::Cpu)?;
    let weight = store.get("gate.conv.weight").context("gate weight")?.var;
    let bias = store.get("gate.conv.bias").context("gate bias")?.var;
    let loss = || -> mptp_core::Result<Tensor> {
        let out = gate.forward(fine.as_tensor(), up.as_tensor())?;
        Ok((out.sqr()? * 0.5)?.sum_all()?)
    };
    let mut worst = loss_check.max_rel_error;
    for (name, var) in [("fine", &fine), ("up", &up), ("weight", &weight), ("bias", &bias)] {
        let g = check_var(var, loss, FD_STEP)?;
        ensure!(g.max_rel_error < GRAD_REL_TOL, "gate grad w.r.t. {name}: rel err {:e}", g.max_rel_error);
        worst = worst.max(g.max_rel_error);
    }
    Ok(format!("max rel err {worst:.2e}"))
}

struct Oracle {
    dice: f64,
    miou: f64,
    acc: f64,
    precision: f64,
    recall: f64,
}

/// Set-based definitions evaluated pixel by pixel.
fn oracle(pred: &[u8], target: &[u8]) -> Oracle {
    let n = pred.len();
    let x: BTreeSet<usize> = (0..n).filter(|&i| pred[i] == 1).collect();
    let y: BTreeSet<usize> = (0..n).filter(|&i| target[i] == 1).collect();
    let xc: BTreeSet<usize> = (0..n).filter(|&i| pred[i] == 0).collect();
    let yc: BTreeSet<usize> = (0..n).filter(|&i| target[i] == 0).collect();
    let iou = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| {
        let u = a.union(b).count();
        if u == 0 {
            1.0
        } else {
            a.intersection(b).count() as f64 / u as f64
        }
    };
    let inter = x.intersection(&y).count() as f64;
    let dice = if x.is_empty() && y.is_empty() { 1.0 } else { 2.0 * inter / (x.len() + y.len()) as f64 };
    let agree = (0..n).filter(|&i| pred[i] == target[i]).count() as f64;
    let frac = |num: f64, set: &BTreeSet<usize>, other: &BTreeSet<usize>| {
        if set.is_empty() {
            if other.is_empty() {
                1.0
            } else {
                0.0
            }
        } else {
            num / set.len() as f64
        }
    };
    Oracle {
        dice,
        miou: 0.5 * (iou(&x, &y) + iou(&xc, &yc)),
        acc: agree / n as f64,
        precision: frac(inter, &x, &y),
        recall: frac(inter, &y, &x),
    }
}

fn metric_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pairs: Vec<(Vec<u8>, Vec<u8>)> = vec![
        (vec![0; 64], vec![0; 64]),
        ((0..64).map(|i| (i < 32) as u8).collect(), (0..64).map(|i| (i >= 32) as u8).collect()),
        (vec![1; 64], vec![1; 64]),
        (vec![0; 64], (0..64).map(|i| (i % 7 == 0) as u8).collect()),
    ];
    while pairs.len() < 200 {
        let density = rng.random_range(0.0..1.0);
        let a = (0..64).map(|_| rng.random_bool(density) as u8).collect();
        let b = (0..64).map(|_| rng.random_bool(density) as u8).collect();
        pairs.push((a, b));
    }
    for (k, (a, b)) in pairs.iter().enumerate() {
        let row = evaluate(&BinaryMask::new(8, 8, a.clone())?, &BinaryMask::new(8, 8, b.clone())?)?;
        let o = oracle(a, b);
        let diffs = [
            (row.dice, o.dice),
            (row.miou, o.miou),
            (row.acc, o.acc),
            (row.precision, o.precision),
            (row.recall, o.recall),
        ];
        for (got, want) in diffs {
            ensure!((got - want).abs() <= METRIC_TOL, "pair {k}: {got} vs oracle {want}");
        }
    }

    // TP 4, FP 2, FN 2, TN 8.
    let pred: Vec<u8> = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0].to_vec();
    let target: Vec<u8> = [1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0].to_vec();
    let (p, t) = (BinaryMask::new(4, 4, pred)?, BinaryMask::new(4, 4, target)?);
    let c = confusion(&p, &t)?;
    ensure!((c.tp, c.fp, c.fn_, c.tn) == (4, 2, 2, 8));
    let row = evaluate(&p, &t)?;
    ensure!((row.acc - 0.75).abs() < 1e-4, "acc {}", row.acc);
    ensure!((row.miou - 0.58333).abs() < 1e-4, "miou {}", row.miou);
    ensure!((row.dice - 0.6667).abs() < 1e-4, "dice {}", row.dice);
    Ok(format!("{} pairs; example acc {:.4} miou {:.5} dice {:.4}", pairs.len(), row.acc, row.miou, row.dice))
}

fn stop_gradient() -> Result<()> {
    let cfg = toy(32, 4, 2);
    let store = ParamStore::new(7, DType::F32);
    let net = SiameseNet::new(&store.root(), &cfg.model, cfg.model.embedder.build()?, &Ablation::default())?;
    let text = net.encoder.text.encode(&captions(2), DType::F32, Exec::Sequential)?;
    let view1 = Var::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu)?;
    let view2 = Var::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu)?;
    let p1 = net.predictor.forward_t(&net.project(view1.as_tensor(), text.level(1), true)?, true)?;
    let z2 = net.project(view2.as_tensor(), text.level(1), true)?;
    let grads = neg_cosine(&p1, &z2)?.backward()?;
    if let Some(g) = grads.get(view2.as_tensor()) {
        let v = to_f64_vec(g)?;
        ensure!(v.iter().all(|&x| x == 0.0), "target branch received gradient");
    }
    let g1 = grads.get(view1.as_tensor()).context("online branch has no gradient")?;
    ensure!(to_f64_vec(g1)?.iter().any(|&x| x != 0.0), "online branch gradient is zero");
    Ok(())
}

fn stage1_contract() -> Result<String> {
    stop_gradient()?;
    let mut cfg = toy(64, 8, 8);
    cfg.stage1.max_steps = Some(100);
    cfg.stage1.epochs = 1000;
    let samples = shapes_dataset(16, 64, 8)?;
    let mut t = Stage1Trainer::new(cfg.clone(), samples, cfg.model.embedder.build()?)?;
    let mut losses = Vec::new();
    let mut min_std = f64::INFINITY;
    while !t.is_done() {
        let r = t.step()?;
        ensure!((-2.0..=2.0).contains(&r.loss), "step {} loss {} out of bounds", r.step, r.loss);
        losses.push(r.loss);
        if r.step % 10 == 0 {
            min_std = min_std.min(t.last_representation_std()?.context("no representation")?);
        }
    }
    ensure!(losses.len() == 100);
    let first = losses[..10].iter().sum::<f64>() / 10.0;
    let last = losses[90..].iter().sum::<f64>() / 10.0;
    ensure!(last < first, "mean loss did not decrease: {first:.4} -> {last:.4}");
    ensure!(min_std > REPR_STD_MIN, "representation std {min_std:.2e}");
    Ok(format!("mean loss {first:.4} -> {last:.4}, min repr std {min_std:.4}"))
}

fn stage2_overfit() -> Result<String> {
    let mut cfg = toy(64, 8, 8);
    cfg.stage2.max_steps = Some(OVERFIT_STEPS);
    cfg.stage2.epochs = 1000;
    let samples = shapes_dataset(8, 64, 9)?;
    let mut t = Stage2Trainer::new(cfg.clone(), samples.clone(), cfg.model.embedder.build()?, Stage2Init::FromScratch)?;
    let mut best = 0.0;
    while !t.is_done() {
        let r = t.step()?;
        if r.step % 10 == 0 {
            let dice = macro_average(&t.evaluate(&samples)?)?.dice;
            best = f64::max(best, dice);
            if dice >= OVERFIT_DICE {
                return Ok(format!("Dice {dice:.4} at step {} (loss {:.4})", r.step, r.loss));
            }
        }
    }
    anyhow::bail!("best Dice {best:.4} after {OVERFIT_STEPS} steps")
}

fn stage2_losses(cfg: &RunConfig, steps: usize) -> Result<Vec<f64>> {
    let samples = shapes_dataset(6, 32, 10)?;
    let mut t = Stage2Trainer::new(cfg.clone(), samples, cfg.model.embedder.build()?, Stage2Init::FromScratch)?;
    (0..steps).map(|_| Ok(t.step()?.loss)).collect()
}

fn stage1_losses(cfg: &RunConfig, steps: usize) -> Result<Vec<f64>> {
    let samples = shapes_dataset(6, 32, 11)?;
    let mut t = Stage1Trainer::new(cfg.clone(), samples, cfg.model.embedder.build()?)?;
    (0..steps).map(|_| Ok(t.step()?.loss)).collect()
}

fn inheritance_and_determinism() -> Result<String> {
    let mut cfg = toy(32, 4, 2);
    cfg.stage1.max_steps = Some(2);
    let samples = shapes_dataset(4, 32, 12)?;
    let emb = cfg.model.embedder.build()?;
    let mut s1 = Stage1Trainer::new(cfg.clone(), samples.clone(), emb.clone())?;
    s1.step()?;
    let bundle = CheckpointBundle::from_bytes(&s1.checkpoint()?.to_bytes()?)?;
    let s2 = Stage2Trainer::new(cfg.clone(), samples, emb, Stage2Init::Inherit(&bundle))?;
    let report = s2.restore_report().context("no restore report")?;
    let restored: BTreeSet<String> = report.restored.iter().cloned().collect();
    let expected: BTreeSet<String> = s2.store().names().into_iter().filter(|n| is_encoder_param(n)).collect();
    let in_bundle: BTreeSet<String> = bundle.params.keys().filter(|n| is_encoder_param(n)).cloned().collect();
    ensure!(restored == expected, "restored set differs from the encoder set");
    ensure!(restored == in_bundle, "restored set differs from the checkpoint's encoder set");
    ensure!(restored.iter().all(|n| n.starts_with("ppe.") || n.starts_with("text_encoder.")));
    let snap = s2.store().snapshot()?;
    for n in &restored {
        ensure!(to_f64_vec(&snap[n])? == to_f64_vec(&bundle.params[n])?, "{n} not restored exactly");
    }

    let mut det = toy(32, 4, 2);
    det.stage1.max_steps = Some(4);
    det.stage2.max_steps = Some(4);
    let mut worst = 0f64;
    for (a, b) in [
        (stage2_losses(&det, 4)?, stage2_losses(&det, 4)?),
        (stage1_losses(&det, 4)?, stage1_losses(&det, 4)?),
    ] {
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= DETERMINISM_TOL, "loss curves differ by {worst:e}");

    for bad in ["horizontal_flip", "vertical-flip", "random_crop", "RandomResizedCrop"] {
        ensure!(matches!(AugmentKind::parse(bad), Err(Error::Config(_))), "{bad} accepted");
        let mut aug = AugmentConfig::default();
        aug.ops.push(mptp_core::pretrain::augment::AugmentOpSpec {
            kind: bad.into(),
            prob: 0.5,
            magnitude: 1.0,
        });
        ensure!(AugmentationPolicy::from_config(&aug).is_err(), "{bad} policy accepted");
    }
    let toml = "[[augment.ops]]\nkind = \"horizontal_flip\"\nprob = 0.5\nmagnitude = 1.0\n";
    ensure!(RunConfig::from_toml_str(toml).is_err(), "flip accepted from TOML");
    Ok(format!("{} names restored, {} ignored; curve diff {worst:.1e}", restored.len(), report.ignored.len()))
}

fn ablation_toggles() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let manifest = write_dataset(&dir.path().join("data"), &shapes_dataset(4, 32, 13)?)?;
    let mut cfg = toy(32, 4, 2);
    cfg.stage2.max_steps = Some(1);
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?)?;
    let mut done = Vec::new();
    for flag in ["--no-downvit", "--no-upvit", "--no-msff", "--no-upattention"] {
        let out_dir = dir.path().join(flag.trim_start_matches('-'));
        let out = Command::new(env!("CARGO_BIN_EXE_mptp"))
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--manifest")
            .arg(&manifest)
            .arg("--output-dir")
            .arg(&out_dir)
            .arg("--from-scratch")
            .arg(flag)
            .output()?;
        ensure!(
            out.status.success(),
            "{flag} failed: {}",
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        );
        let log = std::fs::read_to_string(out_dir.join("train/loss.csv"))?;
        ensure!(log.lines().count() == 2, "{flag}: expected one logged step");
        done.push(flag);
    }
    Ok(done.join(" "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("shape contracts", shape_contracts, Duration::from_secs(60)),
        ("msff rearrangement oracle", msff_oracle, Duration::from_secs(60)),
        ("loss analytics", loss_analytics, Duration::from_secs(60)),
        ("gradient checks", gradient_checks, Duration::from_secs(120)),
        ("metric oracle", metric_oracle, Duration::from_secs(60)),
        ("stage-1 contract", stage1_contract, Duration::from_secs(300)),
        ("stage-2 overfit", stage2_overfit, Duration::from_secs(600)),
        ("inheritance and determinism", inheritance_and_determinism, Duration::from_secs(120)),
        ("ablation toggles", ablation_toggles, Duration::from_secs(120)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(anyhow::anyhow!("panicked: {:?}", p.downcast_ref::<String>())));
        let took = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            ensure!(took <= *budget, "took {:.1}s, budget {}s", took.as_secs_f64(), budget.as_secs());
            Ok(detail)
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({:.1}s): {detail}", i + 1, took.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL [{}] {name} ({:.1}s): {e:#}", i + 1, took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
